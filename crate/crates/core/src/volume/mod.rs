//! Dense single-channel 3D volumes and their multi-channel stacks.
//!
//! Layout is `(z, y, x)` in C order, x fastest. Voxel values are stored as
//! `f32`; masks hold exactly `0.0` or `1.0`.

mod fpvol;

pub use fpvol::{decode_volume, encode_volume, load_volume, save_volume, write_atomic, FPVOL_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Voxel counts along `(z, y, x)`.
pub type Shape = [usize; 3];
/// Physical voxel size in millimetres along `(z, y, x)`.
pub type Spacing = [f64; 3];

/// Spacing used when a volume is synthesized without an explicit one.
pub const DEFAULT_SPACING_MM: Spacing = [1.5, 1.5, 1.5];

/// Standard-deviation guard for [`normalize_zscore`].
pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Probability,
    Mask,
}

impl std::fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VolumeKind::Image => "image",
            VolumeKind::Probability => "probability",
            VolumeKind::Mask => "mask",
        })
    }
}

#[inline]
pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Flat C-order offset of `(z, y, x)`.
#[inline]
pub fn linear_index(shape: Shape, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    shape: Shape,
    spacing: Spacing,
    data: Vec<f32>,
    kind: VolumeKind,
}

impl Volume3D {
    /// Builds a volume, checking every invariant of its kind.
    pub fn new(shape: Shape, spacing: Spacing, data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero axis")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Value(format!("spacing {spacing:?} must be positive and finite")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} voxels, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        check_values(&data, kind)?;
        Ok(Self {
            shape,
            spacing,
            data,
            kind,
        })
    }

    pub fn filled(shape: Shape, spacing: Spacing, value: f32, kind: VolumeKind) -> Result<Self> {
        Self::new(shape, spacing, vec![value; voxel_count(shape)], kind)
    }

    /// Evaluates `f(z, y, x)` at every voxel in C order.
    pub fn from_fn(
        shape: Shape,
        spacing: Spacing,
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, spacing, data, kind)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[linear_index(self.shape, z, y, x)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    pub(crate) fn require_kind(&self, kind: VolumeKind, op: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Kind(format!("{op} needs a {kind} volume, got {}", self.kind)));
        }
        Ok(())
    }

    pub(crate) fn require_same_shape(&self, other: &Volume3D, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Same geometry, new values and kind.
    pub fn with_data(&self, data: Vec<f32>, kind: VolumeKind) -> Result<Volume3D> {
        Volume3D::new(self.shape, self.spacing, data, kind)
    }
}

fn check_values(data: &[f32], kind: VolumeKind) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Value(format!("non-finite voxel value at offset {i}")));
    }
    match kind {
        VolumeKind::Image => Ok(()),
        VolumeKind::Probability => match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::Value(format!(
                "probability value {} at offset {i} is outside [0, 1]",
                data[i]
            ))),
            None => Ok(()),
        },
        VolumeKind::Mask => match data.iter().position(|&v| v != 0.0 && v != 1.0) {
            Some(i) => Err(Error::Kind(format!("mask value {} at offset {i} is not 0 or 1", data[i]))),
            None => Ok(()),
        },
    }
}

/// Ordered channel stack sharing one grid. Channel 0 is CT, channel 1 is PET.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelVolume {
    channels: Vec<Volume3D>,
}

impl MultiChannelVolume {
    pub fn new(channels: Vec<Volume3D>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Dimension("a channel stack needs at least one channel".into()))?;
        for (c, ch) in channels.iter().enumerate().skip(1) {
            if ch.shape != first.shape || ch.spacing != first.spacing {
                return Err(Error::Dimension(format!(
                    "channel {c} grid {:?}@{:?} differs from channel 0 grid {:?}@{:?}",
                    ch.shape, ch.spacing, first.shape, first.spacing
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Volume3D] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &Volume3D {
        &self.channels[c]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> Shape {
        self.channels[0].shape
    }

    pub fn spacing(&self) -> Spacing {
        self.channels[0].spacing
    }

    pub fn into_channels(self) -> Vec<Volume3D> {
        self.channels
    }
}

/// Concatenates CT and PET along the channel axis, in that order.
pub fn stack_channels(ct: Volume3D, pet: Volume3D) -> Result<MultiChannelVolume> {
    if ct.shape != pet.shape {
        return Err(Error::Dimension(format!(
            "ct shape {:?} != pet shape {:?}",
            ct.shape, pet.shape
        )));
    }
    if ct.spacing != pet.spacing {
        return Err(Error::Dimension(format!(
            "ct spacing {:?} != pet spacing {:?}",
            ct.spacing, pet.spacing
        )));
    }
    MultiChannelVolume::new(vec![ct, pet])
}

/// Whole-volume z-score. Constant input maps to all zeros.
pub fn normalize_zscore(v: &Volume3D) -> Result<Volume3D> {
    v.require_kind(VolumeKind::Image, "normalize_zscore")?;
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < ZSCORE_EPS {
        vec![0.0; v.data.len()]
    } else {
        v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect()
    };
    v.with_data(data, VolumeKind::Image)
}

/// Per-axis flip decisions in `(z, y, x)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipAxes(pub [bool; 3]);

impl FlipAxes {
    /// Each axis flipped independently with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        FlipAxes([rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)])
    }

    pub fn is_identity(&self) -> bool {
        self.0 == [false; 3]
    }

    pub fn apply(&self, v: &Volume3D) -> Volume3D {
        if self.is_identity() {
            return v.clone();
        }
        let [nz, ny, nx] = v.shape;
        let [fz, fy, fx] = self.0;
        let mut data = Vec::with_capacity(v.data.len());
        for z in 0..nz {
            let sz = if fz { nz - 1 - z } else { z };
            for y in 0..ny {
                let sy = if fy { ny - 1 - y } else { y };
                let row = linear_index(v.shape, sz, sy, 0);
                if fx {
                    data.extend(v.data[row..row + nx].iter().rev());
                } else {
                    data.extend_from_slice(&v.data[row..row + nx]);
                }
            }
        }
        Volume3D {
            shape: v.shape,
            spacing: v.spacing,
            data,
            kind: v.kind,
        }
    }

    pub fn apply_multi(&self, mc: &MultiChannelVolume) -> MultiChannelVolume {
        MultiChannelVolume {
            channels: mc.channels.iter().map(|c| self.apply(c)).collect(),
        }
    }
}

/// Flips every channel and the mask with one shared set of axis decisions.
pub fn random_flip<R: Rng + ?Sized>(
    mc: &MultiChannelVolume,
    mask: &Volume3D,
    rng: &mut R,
) -> Result<(MultiChannelVolume, Volume3D)> {
    if mask.shape != mc.shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} != image shape {:?}",
            mask.shape,
            mc.shape()
        )));
    }
    let axes = FlipAxes::sample(rng);
    Ok((axes.apply_multi(mc), axes.apply(mask)))
}
