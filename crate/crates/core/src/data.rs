//! Synthetic PET/CT phantoms and model-wise validation splits.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{linear_index, voxel_count, Shape, Spacing, Volume3D, VolumeKind, DEFAULT_SPACING_MM};
use crate::{Error, Result};

const PLACEMENT_RETRIES: usize = 1000;
/// Minimum background gap (voxels) between two lesion surfaces.
const LESION_GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub spacing_mm: Spacing,
    pub n_lesions: usize,
    /// Inclusive `(min, max)` sphere radius in voxels.
    pub lesion_radius_range: (usize, usize),
    /// Added to the PET background inside lesions.
    pub pet_lesion_intensity: f64,
    pub pet_background: f64,
    /// Added to the CT texture inside lesions.
    pub ct_contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale defaults: lesions 20σ above background.
    pub fn desk(shape: Shape, n_lesions: usize, seed: u64) -> Self {
        Self {
            shape,
            spacing_mm: DEFAULT_SPACING_MM,
            n_lesions,
            lesion_radius_range: (3, 6),
            pet_lesion_intensity: 2.0,
            pet_background: 1.0,
            ct_contrast: 0.5,
            noise_sigma: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rmin, rmax) = self.lesion_radius_range;
        if self.shape.contains(&0) {
            return Err(Error::Parameter(format!("shape {:?} must be positive", self.shape)));
        }
        if self.n_lesions > 0 {
            if rmin < 1 || rmin > rmax {
                return Err(Error::Parameter(format!("radius range ({rmin}, {rmax}) is invalid")));
            }
            if self.shape.iter().any(|&d| 2 * rmax + 1 > d) {
                return Err(Error::Parameter(format!(
                    "radius {rmax} does not fit inside shape {:?}",
                    self.shape
                )));
            }
        }
        let reals = [self.pet_lesion_intensity, self.pet_background, self.ct_contrast, self.noise_sigma];
        if reals.iter().any(|v| !v.is_finite()) || self.noise_sigma < 0.0 {
            return Err(Error::Parameter("intensities must be finite and noise_sigma >= 0".into()));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("spacing {:?} must be positive", self.spacing_mm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: [usize; 3],
    pub radius: usize,
}

/// Offsets `d` with `|d|² ≤ r²`, in C order.
pub fn ball_voxels(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dz * dz + dy * dy + dx * dx <= r * r {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn place_spheres(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Sphere>> {
    let (rmin, rmax) = spec.lesion_radius_range;
    let mut placed: Vec<Sphere> = Vec::with_capacity(spec.n_lesions);
    for i in 0..spec.n_lesions {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let r = rng.random_range(rmin..=rmax);
            let center: [usize; 3] = std::array::from_fn(|a| rng.random_range(r..spec.shape[a] - r));
            let clear = placed.iter().all(|s| {
                let d2: f64 = (0..3).map(|a| (center[a] as f64 - s.center[a] as f64).powi(2)).sum();
                d2.sqrt() >= (r + s.radius) as f64 + LESION_GAP
            });
            if clear {
                ok = Some(Sphere { center, radius: r });
                break;
            }
        }
        placed.push(ok.ok_or_else(|| {
            Error::Placement(format!(
                "could not place lesion {} of {} after {PLACEMENT_RETRIES} attempts",
                i + 1,
                spec.n_lesions
            ))
        })?);
    }
    Ok(placed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub ct: Volume3D,
    pub pet: Volume3D,
    pub mask: Volume3D,
    pub lesions: Vec<Sphere>,
}

/// Non-overlapping spherical lesions in a noisy PET background and a
/// textured CT. Deterministic per seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lesions = place_spheres(spec, &mut rng)?;
    let shape = spec.shape;
    let n = voxel_count(shape);

    let mut mask = vec![0.0f32; n];
    for s in &lesions {
        for d in ball_voxels(s.radius) {
            let p: [usize; 3] = std::array::from_fn(|a| (s.center[a] as i64 + d[a]) as usize);
            mask[linear_index(shape, p[0], p[1], p[2])] = 1.0;
        }
    }

    // smooth CT texture: three random plane waves
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;

    let pet: Vec<f32> = mask
        .iter()
        .map(|&m| (spec.pet_background + m as f64 * spec.pet_lesion_intensity + noise.sample(&mut rng)) as f32)
        .collect();
    let mut ct = Vec::with_capacity(n);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let texture: f64 = waves
                    .iter()
                    .map(|(k, phase)| 0.5 * (k[0] * z as f64 + k[1] * y as f64 + k[2] * x as f64 + phase).sin())
                    .sum();
                let m = mask[linear_index(shape, z, y, x)] as f64;
                ct.push((texture + m * spec.ct_contrast + noise.sample(&mut rng)) as f32);
            }
        }
    }

    Ok(Phantom {
        ct: Volume3D::new(shape, spec.spacing_mm, ct, VolumeKind::Image)?,
        pet: Volume3D::new(shape, spec.spacing_mm, pet, VolumeKind::Image)?,
        mask: Volume3D::new(shape, spec.spacing_mm, mask, VolumeKind::Mask)?,
        lesions,
    })
}

/// Equal-prior Gaussian likelihood-ratio classifier on raw PET intensities.
pub fn likelihood_ratio_classifier(pet: &Volume3D, spec: &PhantomSpec) -> Result<Volume3D> {
    pet.require_kind(VolumeKind::Image, "likelihood_ratio_classifier")?;
    let mu0 = spec.pet_background;
    let mu1 = spec.pet_background + spec.pet_lesion_intensity;
    let var = spec.noise_sigma.max(f64::MIN_POSITIVE).powi(2);
    let data = pet
        .data()
        .iter()
        .map(|&x| {
            let x = x as f64;
            let log_lr = ((x - mu0).powi(2) - (x - mu1).powi(2)) / (2.0 * var);
            (log_lr > 0.0) as u8 as f32
        })
        .collect();
    pet.with_data(data, VolumeKind::Mask)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub has_lesion: bool,
}

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub has_lesion: bool,
    pub ct_path: String,
    pub pet_path: String,
    pub mask_path: String,
}

impl ManifestEntry {
    pub fn record(&self) -> CaseRecord {
        CaseRecord {
            case_id: self.case_id.clone(),
            has_lesion: self.has_lesion,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("manifest serialization cannot fail") + "\n")
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelWiseSplit {
    pub val_sets: Vec<Vec<String>>,
    pub train_pool: Vec<String>,
}

/// `k` pairwise-disjoint validation sets of `n_lesion` lesion and `n_normal`
/// normal cases each; everything else goes to the shared training pool.
/// Ids keep manifest order inside every list.
pub fn split_model_wise(
    cases: &[CaseRecord],
    k_sets: usize,
    n_lesion: usize,
    n_normal: usize,
    seed: u64,
) -> Result<ModelWiseSplit> {
    if k_sets == 0 {
        return Err(Error::Parameter("k_sets must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = cases.iter().find(|c| !seen.insert(c.case_id.as_str())) {
        return Err(Error::Data(format!("duplicate case id {}", dup.case_id)));
    }
    let mut lesion: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].has_lesion).collect();
    let mut normal: Vec<usize> = (0..cases.len()).filter(|&i| !cases[i].has_lesion).collect();
    if k_sets * n_lesion > lesion.len() || k_sets * n_normal > normal.len() {
        return Err(Error::Capacity(format!(
            "{k_sets} sets of {n_lesion} lesion + {n_normal} normal cases need {} + {}, have {} + {}",
            k_sets * n_lesion,
            k_sets * n_normal,
            lesion.len(),
            normal.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lesion.shuffle(&mut rng);
    normal.shuffle(&mut rng);

    let mut assigned = vec![false; cases.len()];
    let val_sets = (0..k_sets)
        .map(|s| {
            let mut idx: Vec<usize> = lesion[s * n_lesion..(s + 1) * n_lesion]
                .iter()
                .chain(&normal[s * n_normal..(s + 1) * n_normal])
                .copied()
                .collect();
            idx.sort_unstable();
            idx.iter()
                .map(|&i| {
                    assigned[i] = true;
                    cases[i].case_id.clone()
                })
                .collect()
        })
        .collect();
    let train_pool = (0..cases.len())
        .filter(|&i| !assigned[i])
        .map(|i| cases[i].case_id.clone())
        .collect();
    Ok(ModelWiseSplit { val_sets, train_pool })
}
