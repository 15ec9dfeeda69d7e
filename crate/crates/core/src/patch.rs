//! Patch grids, extraction, Gaussian importance maps and weighted fusion.
//!
//! Sliding-window inference is the composition
//! `compute_grid → extract_patch → predict → fuse_patches`, with the padded
//! high-side margin cropped off the fused result.

use rayon::prelude::*;

use crate::volume::{linear_index, voxel_count, MultiChannelVolume, Shape, Spacing, Volume3D, VolumeKind};
use crate::{Error, Result};

/// Lower bound on every Gaussian weight.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Default `σ / patch_size` ratio per axis.
pub const DEFAULT_SIGMA_SCALE: f64 = 0.125;

/// Corner of a patch in volume coordinates, `(z, y, x)`.
pub type Origin = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    volume_shape: Shape,
    patch_size: Shape,
    stride: Shape,
    origins: Vec<Origin>,
}

impl PatchGrid {
    pub fn volume_shape(&self) -> Shape {
        self.volume_shape
    }

    pub fn patch_size(&self) -> Shape {
        self.patch_size
    }

    pub fn stride(&self) -> Shape {
        self.stride
    }

    /// Origins in lexicographic `(z, y, x)` order.
    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Volume extent after zero-padding axes shorter than the patch.
    pub fn padded_shape(&self) -> Shape {
        std::array::from_fn(|a| self.volume_shape[a].max(self.patch_size[a]))
    }
}

/// `floor(patch · (1 − overlap))`, at least 1.
pub fn stride_for(patch: usize, overlap: f64) -> usize {
    // the epsilon absorbs representation error such as 10 · (1 − 0.7) = 2.9999…
    ((patch as f64 * (1.0 - overlap) + 1e-9).floor() as usize).max(1)
}

/// Origins along one axis: `0, s, 2s, …` with the last one clamped to `dim − patch`.
pub fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let last = dim - patch;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

pub fn compute_grid(shape: Shape, patch_size: Shape, overlap: f64) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Parameter(format!("overlap {overlap} must lie in [0, 1)")));
    }
    if patch_size.iter().chain(shape.iter()).any(|&p| p == 0) {
        return Err(Error::Parameter(format!(
            "patch size {patch_size:?} and shape {shape:?} must be positive"
        )));
    }
    let stride: Shape = std::array::from_fn(|a| stride_for(patch_size[a], overlap));
    let per_axis: [Vec<usize>; 3] = std::array::from_fn(|a| axis_origins(shape[a], patch_size[a], stride[a]));
    let mut origins = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(PatchGrid {
        volume_shape: shape,
        patch_size,
        stride,
        origins,
    })
}

/// Channel-major patch: `data[c · voxels + linear(z, y, x)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    size: Shape,
    channels: usize,
    data: Vec<f32>,
}

impl PatchTensor {
    pub fn new(size: Shape, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * voxel_count(size) {
            return Err(Error::Dimension(format!(
                "{channels} channels of {size:?} need {} values, got {}",
                channels * voxel_count(size),
                data.len()
            )));
        }
        Ok(Self { size, channels, data })
    }

    pub fn size(&self) -> Shape {
        self.size
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.size)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Crops one channel; voxels past the volume edge are 0.
pub fn extract_volume_patch(v: &Volume3D, origin: Origin, size: Shape) -> Result<Vec<f32>> {
    let shape = v.shape();
    if (0..3).any(|a| origin[a] >= shape[a]) {
        return Err(Error::Bounds(format!(
            "origin {origin:?} lies outside volume {shape:?}"
        )));
    }
    let mut out = vec![0.0f32; voxel_count(size)];
    let src = v.data();
    let zn = size[0].min(shape[0] - origin[0]);
    let yn = size[1].min(shape[1] - origin[1]);
    let xn = size[2].min(shape[2] - origin[2]);
    for dz in 0..zn {
        for dy in 0..yn {
            let s = linear_index(shape, origin[0] + dz, origin[1] + dy, origin[2]);
            let d = linear_index(size, dz, dy, 0);
            out[d..d + xn].copy_from_slice(&src[s..s + xn]);
        }
    }
    Ok(out)
}

pub fn extract_patch(mc: &MultiChannelVolume, origin: Origin, size: Shape) -> Result<PatchTensor> {
    let mut data = Vec::with_capacity(mc.num_channels() * voxel_count(size));
    for ch in mc.channels() {
        data.extend(extract_volume_patch(ch, origin, size)?);
    }
    PatchTensor::new(size, mc.num_channels(), data)
}

/// Dense per-voxel weights over one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    size: Shape,
    weights: Vec<f64>,
}

impl WeightMap {
    /// Arbitrary positive weights, e.g. for testing fusion against non-Gaussian maps.
    pub fn from_weights(size: Shape, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != voxel_count(size) {
            return Err(Error::Dimension(format!(
                "weight map {size:?} needs {} weights, got {}",
                voxel_count(size),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Value("weights must be positive and finite".into()));
        }
        Ok(Self { size, weights })
    }

    pub fn uniform(size: Shape) -> Self {
        Self {
            size,
            weights: vec![1.0; voxel_count(size)],
        }
    }

    pub fn size(&self) -> Shape {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.weights[linear_index(self.size, z, y, x)]
    }
}

/// `w(v) = max(1e-6, exp(−Σ (v_a − c_a)² / 2σ_a²))`, `c_a = (P_a − 1)/2`, `σ_a = sigma_scale · P_a`.
pub fn gaussian_weight_map(size: Shape, sigma_scale: f64) -> Result<WeightMap> {
    if !(sigma_scale.is_finite() && sigma_scale > 0.0) {
        return Err(Error::Parameter(format!("sigma_scale {sigma_scale} must be > 0")));
    }
    if size.contains(&0) {
        return Err(Error::Parameter(format!("patch size {size:?} must be positive")));
    }
    // separable: exp(-a-b-c) = exp(-a)·exp(-b)·exp(-c), but the floor applies to the product
    let axis_terms: [Vec<f64>; 3] = std::array::from_fn(|a| {
        let c = (size[a] as f64 - 1.0) / 2.0;
        let sigma = sigma_scale * size[a] as f64;
        (0..size[a])
            .map(|i| {
                let d = i as f64 - c;
                d * d / (2.0 * sigma * sigma)
            })
            .collect()
    });
    let mut weights = Vec::with_capacity(voxel_count(size));
    for tz in &axis_terms[0] {
        for ty in &axis_terms[1] {
            for tx in &axis_terms[2] {
                weights.push((-(tz + ty + tx)).exp().max(WEIGHT_FLOOR));
            }
        }
    }
    Ok(WeightMap { size, weights })
}

/// Normalized weighted average of overlapping patch predictions.
///
/// Patches are accumulated in the order given, in `f64`; voxels of a patch
/// that fall outside `out_shape` (padding) are dropped.
pub fn fuse_patches(
    preds: &[(Origin, Vec<f32>)],
    out_shape: Shape,
    spacing: Spacing,
    wmap: &WeightMap,
) -> Result<Volume3D> {
    let size = wmap.size;
    let n = voxel_count(out_shape);
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    for (origin, patch) in preds {
        if patch.len() != voxel_count(size) {
            return Err(Error::Dimension(format!(
                "patch at {origin:?} has {} values, weight map expects {}",
                patch.len(),
                voxel_count(size)
            )));
        }
        let zn = size[0].min(out_shape[0].saturating_sub(origin[0]));
        let yn = size[1].min(out_shape[1].saturating_sub(origin[1]));
        let xn = size[2].min(out_shape[2].saturating_sub(origin[2]));
        for dz in 0..zn {
            for dy in 0..yn {
                let o = linear_index(out_shape, origin[0] + dz, origin[1] + dy, origin[2]);
                let p = linear_index(size, dz, dy, 0);
                for dx in 0..xn {
                    let w = wmap.weights[p + dx];
                    num[o + dx] += w * patch[p + dx] as f64;
                    den[o + dx] += w;
                }
            }
        }
    }
    if let Some(i) = den.iter().position(|&d| d == 0.0) {
        let x = i % out_shape[2];
        let y = i / out_shape[2] % out_shape[1];
        let z = i / (out_shape[1] * out_shape[2]);
        return Err(Error::Coverage(format!("voxel ({z}, {y}, {x}) is not covered by any patch")));
    }
    let data = num
        .iter()
        .zip(&den)
        .map(|(a, b)| ((a / b) as f32).clamp(0.0, 1.0))
        .collect();
    Volume3D::new(out_shape, spacing, data, VolumeKind::Probability)
}

/// Maps one input patch to one probability patch of the same spatial size.
pub trait PatchPredictor: Sync {
    fn predict(&self, patch: &PatchTensor) -> Vec<f32>;
}

impl<F> PatchPredictor for F
where
    F: Fn(&PatchTensor) -> Vec<f32> + Sync,
{
    fn predict(&self, patch: &PatchTensor) -> Vec<f32> {
        self(patch)
    }
}

/// Predicts every grid patch in parallel, then fuses them in grid order.
pub fn sliding_window_infer<P: PatchPredictor + ?Sized>(
    mc: &MultiChannelVolume,
    predictor: &P,
    overlap: f64,
    wmap: &WeightMap,
) -> Result<Volume3D> {
    let size = wmap.size();
    let grid = compute_grid(mc.shape(), size, overlap)?;
    let preds = grid
        .origins()
        .par_iter()
        .map(|&origin| {
            let patch = extract_patch(mc, origin, size)?;
            let out = predictor.predict(&patch);
            if out.len() != patch.voxels() {
                return Err(Error::Contract(format!(
                    "predictor returned {} values for a {size:?} patch",
                    out.len()
                )));
            }
            if let Some(v) = out.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!("predictor output {v} is outside [0, 1]")));
            }
            Ok((origin, out))
        })
        .collect::<Result<Vec<_>>>()?;
    fuse_patches(&preds, mc.shape(), mc.spacing(), wmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_SPACING_MM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_axis_rules() {
        assert_eq!(axis_origins(256, 128, stride_for(128, 0.5)), vec![0, 64, 128]);
        assert_eq!(axis_origins(128, 128, 64), vec![0]);
        assert_eq!(axis_origins(200, 128, 64), vec![0, 64, 72]);
        assert_eq!(axis_origins(50, 64, 32), vec![0]);
        assert_eq!(stride_for(10, 0.7), 3);
        assert_eq!(stride_for(4, 0.99), 1);

        let g = compute_grid([256, 200, 128], [128; 3], 0.5).unwrap();
        assert_eq!(g.len(), 3 * 3);
        assert_eq!(g.stride(), [64; 3]);
        assert!(g.origins().windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(compute_grid([8; 3], [4; 3], 1.0), Err(Error::Parameter(_))));
        assert!(compute_grid([8; 3], [4; 3], -0.1).is_err());
    }

    #[test]
    fn grid_covers_every_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let patch: Shape = std::array::from_fn(|_| rng.random_range(1..12));
            let shape: Shape = std::array::from_fn(|a| rng.random_range(patch[a]..40));
            let overlap = rng.random_range(0.0..0.9);
            let g = compute_grid(shape, patch, overlap).unwrap();
            let mut hit = vec![false; voxel_count(shape)];
            for o in g.origins() {
                for a in 0..3 {
                    assert!(o[a] + patch[a] <= g.padded_shape()[a]);
                }
                for z in o[0]..o[0] + patch[0] {
                    for y in o[1]..o[1] + patch[1] {
                        for x in o[2]..o[2] + patch[2] {
                            hit[linear_index(shape, z, y, x)] = true;
                        }
                    }
                }
            }
            assert!(hit.iter().all(|&h| h), "uncovered voxel for {shape:?} / {patch:?}");
        }
    }

    #[test]
    fn extract_shifted_patch_pads_with_zero() {
        let v = Volume3D::new([2, 2, 2], DEFAULT_SPACING_MM, (0..8).map(|i| i as f32).collect(), VolumeKind::Image)
            .unwrap();
        let p = extract_volume_patch(&v, [0, 0, 1], [2, 2, 2]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0, 0.0]);
        assert_eq!(extract_volume_patch(&v, [0, 0, 0], [2, 2, 2]).unwrap(), v.data());
        assert!(matches!(extract_volume_patch(&v, [0, 2, 0], [2, 2, 2]), Err(Error::Bounds(_))));
    }

    #[test]
    fn full_grid_of_256_cube_has_27_patches() {
        let g = compute_grid([256; 3], [128; 3], 0.5).unwrap();
        assert_eq!(g.len(), 27);
    }

    #[test]
    fn gaussian_map_shape() {
        let w = gaussian_weight_map([1, 1, 4], 0.125).unwrap();
        assert!((w.get(0, 0, 0) - (-4.5f64).exp()).abs() < 1e-15);
        assert!((w.get(0, 0, 0) - 0.011109).abs() < 1e-6);

        let w = gaussian_weight_map([5, 6, 7], 0.125).unwrap();
        let max = w.weights().iter().cloned().fold(0.0, f64::max);
        assert_eq!(w.get(2, 2, 3), max);
        assert_eq!(w.get(2, 3, 3), max);
        for z in 0..5 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(w.get(z, y, x), w.get(4 - z, y, x));
                    assert_eq!(w.get(z, y, x), w.get(z, 5 - y, x));
                    assert_eq!(w.get(z, y, x), w.get(z, y, 6 - x));
                }
            }
        }
        let tiny = gaussian_weight_map([64; 3], 0.01).unwrap();
        assert!(tiny.weights().iter().all(|&w| w >= WEIGHT_FLOOR));
        assert!(gaussian_weight_map([4; 3], 0.0).is_err());
    }

    #[test]
    fn fusion_identities() {
        let shape = [3, 3, 3];
        let w = gaussian_weight_map(shape, 0.125).unwrap();
        let p: Vec<f32> = (0..27).map(|i| i as f32 / 27.0).collect();
        let one = fuse_patches(&[([0; 3], p.clone())], shape, DEFAULT_SPACING_MM, &w).unwrap();
        assert_eq!(one.data(), &p[..]);

        let two = fuse_patches(
            &[([0; 3], vec![0.2; 27]), ([0; 3], vec![0.6; 27])],
            shape,
            DEFAULT_SPACING_MM,
            &w,
        )
        .unwrap();
        assert!(two.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));

        let err = fuse_patches(&[([0; 3], p)], [3, 3, 4], DEFAULT_SPACING_MM, &w).unwrap_err();
        assert!(matches!(err, Error::Coverage(_)));
    }

    #[test]
    fn sliding_window_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = [20, 17, 23];
        let pet = Volume3D::from_fn(shape, DEFAULT_SPACING_MM, VolumeKind::Image, |_, _, _| rng.random()).unwrap();
        let ct = Volume3D::filled(shape, DEFAULT_SPACING_MM, 0.0, VolumeKind::Image).unwrap();
        let mc = crate::volume::stack_channels(ct, pet.clone()).unwrap();
        let w = gaussian_weight_map([8; 3], 0.125).unwrap();

        let pet_channel = |p: &PatchTensor| p.channel(1).to_vec();
        let out = sliding_window_infer(&mc, &pet_channel, 0.5, &w).unwrap();
        assert_eq!(out.shape(), shape);
        for (a, b) in out.data().iter().zip(pet.data()) {
            assert!((a - b).abs() < 1e-5);
        }

        let half = |p: &PatchTensor| vec![0.5; p.voxels()];
        let out = sliding_window_infer(&mc, &half, 0.5, &w).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));

        let bad = |p: &PatchTensor| vec![1.5; p.voxels()];
        assert!(matches!(sliding_window_infer(&mc, &bad, 0.5, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn padded_axes_are_cropped() {
        let shape = [96, 96, 96];
        let mc = MultiChannelVolume::new(vec![Volume3D::filled(shape, DEFAULT_SPACING_MM, 0.0, VolumeKind::Image).unwrap()])
            .unwrap();
        let w = gaussian_weight_map([64; 3], 0.125).unwrap();
        let zero = |p: &PatchTensor| vec![0.0; p.voxels()];
        assert_eq!(sliding_window_infer(&mc, &zero, 0.5, &w).unwrap().shape(), shape);

        let small = MultiChannelVolume::new(vec![Volume3D::filled([5, 9, 3], DEFAULT_SPACING_MM, 0.0, VolumeKind::Image).unwrap()])
            .unwrap();
        assert_eq!(sliding_window_infer(&small, &zero, 0.5, &gaussian_weight_map([8; 3], 0.125).unwrap())
            .unwrap()
            .shape(), [5, 9, 3]);
    }
}
