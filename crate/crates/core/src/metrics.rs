//! Lesion-level evaluation: dice, false positive / false negative volumes and
//! the aggregate score `dice − 0.1·FPV − 0.1·FNV` (volumes in ml).

use serde::{Deserialize, Serialize};

use crate::volume::{linear_index, Volume3D, VolumeKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    #[default]
    Eighteen,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::Parameter(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    fn max_l1(self) -> i32 {
        match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        }
    }

    /// All neighbour offsets `(dz, dy, dx)`.
    pub fn offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let l1 = dz.abs() + dy.abs() + dx.abs();
                    if l1 > 0 && l1 <= self.max_l1() {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    /// Offsets that precede the current voxel in C-order scan.
    fn backward_offsets(self) -> Vec<[i32; 3]> {
        self.offsets().into_iter().filter(|d| *d < [0, 0, 0]).collect()
    }
}

fn require_mask(v: &Volume3D, op: &str) -> Result<()> {
    v.require_kind(VolumeKind::Mask, op)
}

fn require_pair(pred: &Volume3D, gt: &Volume3D, op: &str) -> Result<()> {
    require_mask(pred, op)?;
    require_mask(gt, op)?;
    pred.require_same_shape(gt, op)?;
    if pred.spacing() != gt.spacing() {
        return Err(Error::Dimension(format!(
            "{op}: spacings {:?} and {:?} differ",
            pred.spacing(),
            gt.spacing()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`, 1.0 when both are empty.
pub fn dice_coefficient(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    require_mask(pred, "dice_coefficient")?;
    require_mask(gt, "dice_coefficient")?;
    pred.require_same_shape(gt, "dice_coefficient")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Connected-component labels of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    /// 0 for background, `1..=num_components` otherwise, C order.
    pub labels: Vec<u32>,
    pub num_components: u32,
    pub connectivity: Connectivity,
}

impl ComponentLabeling {
    /// Voxel count per component, indexed by `label − 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_components as usize];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the older provisional label as root
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling. Labels are numbered in order of each
/// component's first voxel in C-order scan.
pub fn connected_components(mask: &Volume3D, connectivity: Connectivity) -> Result<ComponentLabeling> {
    require_mask(mask, "connected_components")?;
    let shape = mask.shape();
    let [nz, ny, nx] = shape.map(|d| d as i64);
    let data = mask.data();
    let backward = connectivity.backward_offsets();

    const NONE: u32 = u32::MAX;
    let mut prov = vec![NONE; data.len()];
    let mut uf = UnionFind { parent: Vec::new() };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = linear_index(shape, z as usize, y as usize, x as usize);
                if data[i] == 0.0 {
                    continue;
                }
                let mut label = NONE;
                for d in &backward {
                    let (qz, qy, qx) = (z + d[0] as i64, y + d[1] as i64, x + d[2] as i64);
                    if qz < 0 || qy < 0 || qx < 0 || qy >= ny || qx >= nx {
                        continue;
                    }
                    let q = prov[linear_index(shape, qz as usize, qy as usize, qx as usize)];
                    if q == NONE {
                        continue;
                    }
                    if label == NONE {
                        label = q;
                    } else {
                        uf.union(label, q);
                    }
                }
                prov[i] = if label == NONE { uf.make() } else { label };
            }
        }
    }

    let mut root_to_final = vec![0u32; uf.parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; data.len()];
    for (i, &p) in prov.iter().enumerate() {
        if p == NONE {
            continue;
        }
        let r = uf.find(p) as usize;
        if root_to_final[r] == 0 {
            next += 1;
            root_to_final[r] = next;
        }
        labels[i] = root_to_final[r];
    }
    Ok(ComponentLabeling {
        labels,
        num_components: next,
        connectivity,
    })
}

/// Total voxels of `a`'s components that share no voxel with `b`.
fn unmatched_component_voxels(a: &Volume3D, b: &Volume3D, connectivity: Connectivity) -> Result<usize> {
    let lab = connected_components(a, connectivity)?;
    let mut touched = vec![false; lab.num_components as usize];
    for (&l, &bv) in lab.labels.iter().zip(b.data()) {
        if l > 0 && bv != 0.0 {
            touched[l as usize - 1] = true;
        }
    }
    Ok(lab
        .sizes()
        .iter()
        .zip(&touched)
        .filter(|(_, &t)| !t)
        .map(|(&s, _)| s)
        .sum())
}

fn voxels_to_ml(voxels: usize, v: &Volume3D) -> f64 {
    voxels as f64 * v.voxel_volume_mm3() / 1000.0
}

/// Volume (ml) of predicted components with no ground-truth overlap.
pub fn fpv(pred: &Volume3D, gt: &Volume3D, connectivity: Connectivity) -> Result<f64> {
    require_pair(pred, gt, "fpv")?;
    Ok(voxels_to_ml(unmatched_component_voxels(pred, gt, connectivity)?, pred))
}

/// Volume (ml) of ground-truth components with no predicted overlap.
pub fn fnv(pred: &Volume3D, gt: &Volume3D, connectivity: Connectivity) -> Result<f64> {
    require_pair(pred, gt, "fnv")?;
    Ok(voxels_to_ml(unmatched_component_voxels(gt, pred, connectivity)?, gt))
}

pub fn aggregate_score(dice: f64, fpv_ml: f64, fnv_ml: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&dice) {
        return Err(Error::Range(format!("dice {dice} is outside [0, 1]")));
    }
    if !(fpv_ml >= 0.0 && fnv_ml >= 0.0 && fpv_ml.is_finite() && fnv_ml.is_finite()) {
        return Err(Error::Range(format!("volumes ({fpv_ml}, {fnv_ml}) must be finite and >= 0")));
    }
    Ok(dice - 0.1 * fpv_ml - 0.1 * fnv_ml)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
    pub score: f64,
}

pub fn evaluate_case(pred: &Volume3D, gt: &Volume3D, connectivity: Connectivity) -> Result<MetricsReport> {
    require_pair(pred, gt, "evaluate_case")?;
    let dice = dice_coefficient(pred, gt)?;
    let fpv_ml = fpv(pred, gt, connectivity)?;
    let fnv_ml = fnv(pred, gt, connectivity)?;
    Ok(MetricsReport {
        dice,
        fpv_ml,
        fnv_ml,
        score: aggregate_score(dice, fpv_ml, fnv_ml)?,
    })
}

/// One line of the `eval` output stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub dice: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
    pub score: f64,
}

impl CaseReport {
    pub fn new(case_id: impl Into<String>, m: MetricsReport) -> Self {
        Self {
            case_id: case_id.into(),
            dice: m.dice,
            fpv_ml: m.fpv_ml,
            fnv_ml: m.fnv_ml,
            score: m.score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub mean_dice: f64,
    pub mean_fpv_ml: f64,
    pub mean_fnv_ml: f64,
    pub mean_score: f64,
}

pub fn summarize(reports: &[CaseReport]) -> Result<SummaryReport> {
    if reports.is_empty() {
        return Err(Error::Parameter("cannot summarize zero cases".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&CaseReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(SummaryReport {
        mean_dice: mean(|r| r.dice),
        mean_fpv_ml: mean(|r| r.fpv_ml),
        mean_fnv_ml: mean(|r| r.fnv_ml),
        mean_score: mean(|r| r.score),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_SPACING_MM;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> Volume3D {
        Volume3D::from_fn(shape, DEFAULT_SPACING_MM, VolumeKind::Mask, |z, y, x| {
            on.contains(&[z, y, x]) as u8 as f32
        })
        .unwrap()
    }

    fn cube(shape: [usize; 3], lo: [usize; 3], side: usize) -> Volume3D {
        Volume3D::from_fn(shape, DEFAULT_SPACING_MM, VolumeKind::Mask, |z, y, x| {
            let p = [z, y, x];
            (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + side) as u8 as f32
        })
        .unwrap()
    }

    #[test]
    fn neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert_eq!(Connectivity::TwentySix.backward_offsets().len(), 13);
        assert!(Connectivity::from_count(8).is_err());
    }

    #[test]
    fn dice_cases() {
        let a = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2]]);
        let b = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 3]]);
        assert!((dice_coefficient(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let c = mask([1, 1, 4], &[[0, 0, 3]]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.0);
        let e = mask([1, 1, 4], &[]);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
        assert!(dice_coefficient(&a, &mask([1, 1, 3], &[])).is_err());
    }

    #[test]
    fn component_counts() {
        let gap = mask([1, 1, 3], &[[0, 0, 0], [0, 0, 2]]);
        for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            assert_eq!(connected_components(&gap, c).unwrap().num_components, 2);
        }
        let corner = mask([2, 2, 2], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).unwrap().num_components, 1);
        assert_eq!(connected_components(&corner, Connectivity::Eighteen).unwrap().num_components, 2);
        assert_eq!(connected_components(&corner, Connectivity::Six).unwrap().num_components, 2);
        let edge = mask([1, 2, 2], &[[0, 0, 0], [0, 1, 1]]);
        assert_eq!(connected_components(&edge, Connectivity::Eighteen).unwrap().num_components, 1);
        assert_eq!(connected_components(&mask([3, 3, 3], &[]), Connectivity::Six).unwrap().num_components, 0);

        let img = Volume3D::filled([2, 2, 2], DEFAULT_SPACING_MM, 0.3, VolumeKind::Image).unwrap();
        assert!(matches!(connected_components(&img, Connectivity::Six), Err(Error::Kind(_))));
    }

    #[test]
    fn labels_follow_scan_order() {
        // a "U" whose arms are first met separately and merged on a later row
        let m = mask([1, 3, 3], &[[0, 0, 0], [0, 0, 2], [0, 1, 0], [0, 1, 2], [0, 2, 0], [0, 2, 1], [0, 2, 2]]);
        let l = connected_components(&m, Connectivity::Six).unwrap();
        assert_eq!(l.num_components, 1);
        let m = mask([1, 1, 5], &[[0, 0, 4], [0, 0, 0], [0, 0, 2]]);
        let l = connected_components(&m, Connectivity::Six).unwrap();
        assert_eq!(l.labels, vec![1, 0, 2, 0, 3]);
    }

    #[test]
    fn false_positive_volume() {
        let shape = [10, 10, 10];
        let gt = cube(shape, [0, 0, 0], 3);
        let inside = cube(shape, [0, 0, 0], 2);
        assert_eq!(fpv(&inside, &gt, Connectivity::Eighteen).unwrap(), 0.0);

        let away = cube(shape, [6, 6, 6], 2);
        assert!((fpv(&away, &gt, Connectivity::Eighteen).unwrap() - 0.027).abs() < 1e-15);

        let touching = cube(shape, [2, 2, 2], 2);
        assert_eq!(fpv(&touching, &gt, Connectivity::Eighteen).unwrap(), 0.0);
    }

    #[test]
    fn false_negative_volume() {
        let shape = [10, 10, 10];
        let lesion = Volume3D::from_fn(shape, DEFAULT_SPACING_MM, VolumeKind::Mask, |z, _, _| {
            (z == 0) as u8 as f32
        })
        .unwrap();
        let empty = mask(shape, &[]);
        assert_eq!(fnv(&lesion, &lesion, Connectivity::Eighteen).unwrap(), 0.0);
        assert!((fnv(&empty, &lesion, Connectivity::Eighteen).unwrap() - 0.3375).abs() < 1e-15);
        let one = mask(shape, &[[0, 4, 4]]);
        assert_eq!(fnv(&one, &lesion, Connectivity::Eighteen).unwrap(), 0.0);
    }

    #[test]
    fn score_values() {
        assert_eq!(aggregate_score(1.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(aggregate_score(0.8, 1.2, 0.3).unwrap(), 0.65);
        assert!((aggregate_score(0.0, 5.0, 5.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(aggregate_score(1.2, 0.0, 0.0), Err(Error::Range(_))));
        assert!(aggregate_score(0.5, -1.0, 0.0).is_err());
    }

    #[test]
    fn case_reports() {
        let shape = [12, 12, 12];
        let e = mask(shape, &[]);
        let r = evaluate_case(&e, &e, Connectivity::Eighteen).unwrap();
        assert_eq!((r.dice, r.fpv_ml, r.fnv_ml, r.score), (1.0, 0.0, 0.0, 1.0));

        // gt: detected 27-voxel cube + missed 8-voxel cube; pred: the first cube only
        let gt = Volume3D::new(
            shape,
            DEFAULT_SPACING_MM,
            cube(shape, [0, 0, 0], 3)
                .data()
                .iter()
                .zip(cube(shape, [8, 8, 8], 2).data())
                .map(|(a, b)| a.max(*b))
                .collect(),
            VolumeKind::Mask,
        )
        .unwrap();
        let pred = cube(shape, [0, 0, 0], 3);
        let r = evaluate_case(&pred, &gt, Connectivity::Eighteen).unwrap();
        assert!((r.dice - 54.0 / 62.0).abs() < 1e-15);
        assert_eq!(r.fpv_ml, 0.0);
        assert!((r.fnv_ml - 8.0 * 3.375 / 1000.0).abs() < 1e-15);
        assert_eq!(r.score, r.dice - 0.1 * r.fpv_ml - 0.1 * r.fnv_ml);
    }
}
