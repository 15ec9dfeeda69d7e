//! Full-volume post-model steps: weighted ensembling, thresholding and
//! binary morphology with a discrete Euclidean ball.
//!
//! Morphology treats voxels outside the volume as background, so erosion eats
//! the volume border and dilation never grows past it.

use rayon::prelude::*;

use crate::volume::{linear_index, Volume3D, VolumeKind};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Named ensemble members with weights normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    members: Vec<(String, f64)>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<(String, f64)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Parameter("an ensemble needs at least one member".into()));
        }
        if let Some((id, w)) = members.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Parameter(format!("member {id} has non-positive weight {w}")));
        }
        let total: f64 = members.iter().map(|(_, w)| w).sum();
        Ok(Self {
            members: members.into_iter().map(|(id, w)| (id, w / total)).collect(),
        })
    }

    pub fn members(&self) -> &[(String, f64)] {
        &self.members
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.members.iter().map(|(_, w)| *w)
    }
}

/// Voxelwise `Σ wᵢ pᵢ`.
pub fn ensemble_average(probs: &[Volume3D], spec: &EnsembleSpec) -> Result<Volume3D> {
    if probs.len() != spec.members.len() {
        return Err(Error::Dimension(format!(
            "{} probability volumes for {} ensemble members",
            probs.len(),
            spec.members.len()
        )));
    }
    let first = &probs[0];
    for p in probs {
        p.require_kind(VolumeKind::Probability, "ensemble_average")?;
        p.require_same_shape(first, "ensemble_average")?;
    }
    let mut acc = vec![0.0f64; first.len()];
    for (p, w) in probs.iter().zip(spec.weights()) {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += w * v as f64;
        }
    }
    first.with_data(
        acc.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect(),
        VolumeKind::Probability,
    )
}

/// `prob > t`, strictly.
pub fn threshold_prob(prob: &Volume3D, t: f64) -> Result<Volume3D> {
    prob.require_kind(VolumeKind::Probability, "threshold_prob")?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Range(format!("threshold {t} must lie in (0, 1)")));
    }
    prob.with_data(
        prob.data().iter().map(|&p| ((p as f64) > t) as u8 as f32).collect(),
        VolumeKind::Mask,
    )
}

/// Offsets `d` with `|d|² ≤ r²`.
pub fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
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

fn morph(mask: &Volume3D, radius: usize, erode: bool) -> Result<Volume3D> {
    mask.require_kind(VolumeKind::Mask, if erode { "erode" } else { "dilate" })?;
    if radius == 0 {
        return Err(Error::Parameter("structuring element radius must be >= 1".into()));
    }
    let shape = mask.shape();
    let [nz, ny, nx] = shape.map(|d| d as i64);
    let src = mask.data();
    let ball = ball_offsets(radius);
    let plane = shape[1] * shape[2];
    let mut out = vec![0.0f32; src.len()];
    // one z-slab per task; each task reads the source within `radius` of its slab
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let z = z as i64;
        for y in 0..ny {
            for x in 0..nx {
                let at = |d: &[i64; 3]| {
                    let (qz, qy, qx) = (z + d[0], y + d[1], x + d[2]);
                    qz >= 0
                        && qy >= 0
                        && qx >= 0
                        && qz < nz
                        && qy < ny
                        && qx < nx
                        && src[linear_index(shape, qz as usize, qy as usize, qx as usize)] != 0.0
                };
                let on = if erode { ball.iter().all(at) } else { ball.iter().any(at) };
                slab[(y * nx + x) as usize] = on as u8 as f32;
            }
        }
    });
    mask.with_data(out, VolumeKind::Mask)
}

pub fn erode(mask: &Volume3D, radius: usize) -> Result<Volume3D> {
    morph(mask, radius, true)
}

pub fn dilate(mask: &Volume3D, radius: usize) -> Result<Volume3D> {
    morph(mask, radius, false)
}

/// Morphological opening: `dilate(erode(mask, r), r)`.
pub fn postprocess_open(mask: &Volume3D, radius: usize) -> Result<Volume3D> {
    dilate(&erode(mask, radius)?, radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_SPACING_MM;

    fn prob(shape: [usize; 3], v: f32) -> Volume3D {
        Volume3D::filled(shape, DEFAULT_SPACING_MM, v, VolumeKind::Probability).unwrap()
    }

    fn single(shape: [usize; 3], at: [usize; 3]) -> Volume3D {
        Volume3D::from_fn(shape, DEFAULT_SPACING_MM, VolumeKind::Mask, |z, y, x| ([z, y, x] == at) as u8 as f32)
            .unwrap()
    }

    #[test]
    fn ensemble_weights() {
        let spec = EnsembleSpec::new(vec![("a".into(), 3.0), ("b".into(), 1.0)]).unwrap();
        let w: Vec<f64> = spec.weights().collect();
        assert_eq!(w, vec![0.75, 0.25]);
        let out = ensemble_average(&[prob([2, 2, 2], 0.2), prob([2, 2, 2], 0.8)], &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.35).abs() < 1e-7));

        let one = EnsembleSpec::new(vec![("m".into(), 2.0)]).unwrap();
        let p = prob([2, 2, 2], 0.3);
        assert_eq!(ensemble_average(std::slice::from_ref(&p), &one).unwrap(), p);

        assert!(EnsembleSpec::new(vec![]).is_err());
        assert!(EnsembleSpec::new(vec![("x".into(), 0.0)]).is_err());
        assert!(matches!(
            ensemble_average(&[prob([2, 2, 2], 0.2), prob([2, 2, 3], 0.8)], &spec),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn threshold_rules() {
        assert_eq!(threshold_prob(&prob([2, 2, 2], 0.0), 0.5).unwrap().count_nonzero(), 0);
        assert_eq!(threshold_prob(&prob([2, 2, 2], 0.5), 0.5).unwrap().count_nonzero(), 0);
        assert_eq!(threshold_prob(&prob([2, 2, 2], 0.6), 0.5).unwrap().count_nonzero(), 8);
        assert!(matches!(threshold_prob(&prob([1, 1, 1], 0.6), 1.0), Err(Error::Range(_))));
    }

    #[test]
    fn ball_sizes() {
        assert_eq!(ball_offsets(1).len(), 7);
        assert_eq!(ball_offsets(2).len(), 33);
    }

    #[test]
    fn erode_full_volume_removes_shell() {
        let full = Volume3D::filled([5, 6, 7], DEFAULT_SPACING_MM, 1.0, VolumeKind::Mask).unwrap();
        let e = erode(&full, 1).unwrap();
        assert_eq!(e.count_nonzero(), 3 * 4 * 5);
        assert_eq!(e.get(1, 1, 1), 1.0);
        assert_eq!(e.get(0, 3, 3), 0.0);
        assert_eq!(dilate(&full, 2).unwrap(), full);
        let empty = Volume3D::filled([5, 6, 7], DEFAULT_SPACING_MM, 0.0, VolumeKind::Mask).unwrap();
        assert_eq!(erode(&empty, 2).unwrap(), empty);
    }

    #[test]
    fn dilate_single_voxel_gives_ball() {
        let d = dilate(&single([7, 7, 7], [3, 3, 3]), 2).unwrap();
        assert_eq!(d.count_nonzero(), 33);
        assert_eq!(d.get(3, 3, 5), 1.0);
        assert_eq!(d.get(3, 5, 5), 0.0);
    }

    #[test]
    fn opening_removes_speckle() {
        let s = single([5, 5, 5], [2, 2, 2]);
        assert_eq!(postprocess_open(&s, 1).unwrap().count_nonzero(), 0);
        let img = Volume3D::filled([2, 2, 2], DEFAULT_SPACING_MM, 1.0, VolumeKind::Image).unwrap();
        assert!(matches!(erode(&img, 1), Err(Error::Kind(_))));
    }
}
