//! Hard-patch curriculum.
//!
//! After every epoch the latest loss of each training patch is split into an
//! easy and a hard class at the Otsu threshold (maximum between-class variance
//! over the sorted losses). The hardest `exclude_frac` of the hard class is
//! left out of the next epoch and the remaining hard patches are repeated
//! `oversample_factor` times. Classification is recomputed from the registry
//! every time, so patches move between classes as the model changes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative tolerance under which two between-class variances count as tied.
pub const OTSU_TIE_RTOL: f64 = 1e-12;

pub const DEFAULT_OVERSAMPLE_FACTOR: usize = 2;
pub const DEFAULT_EXCLUDE_FRAC: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchId(pub u32);

impl std::fmt::Display for PatchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Latest training loss per patch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRegistry {
    entries: BTreeMap<PatchId, f64>,
    epoch_tag: u32,
}

impl LossRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Last write wins.
    pub fn record_loss(&mut self, id: PatchId, loss: f64) -> Result<()> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::Value(format!("loss {loss} for patch {id} must be finite and >= 0")));
        }
        self.entries.insert(id, loss);
        Ok(())
    }

    /// Folds a per-worker buffer into the registry in buffer order.
    pub fn merge(&mut self, updates: impl IntoIterator<Item = (PatchId, f64)>) -> Result<()> {
        for (id, loss) in updates {
            self.record_loss(id, loss)?;
        }
        Ok(())
    }

    pub fn get(&self, id: PatchId) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<PatchId, f64> {
        &self.entries
    }

    pub fn epoch_tag(&self) -> u32 {
        self.epoch_tag
    }

    pub fn set_epoch_tag(&mut self, tag: u32) {
        self.epoch_tag = tag;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtsuSplit {
    pub threshold: f64,
    /// Size of the low (easy) class in the sorted values; `n` when no split exists.
    pub split_index: usize,
}

/// Exact Otsu split over sorted values.
///
/// For every `k ∈ [1, n−1]` the low class is the first `k` sorted values and
/// `σ_b²(k) = (k/n)((n−k)/n)(μ_low − μ_high)²`. The smallest `k` within
/// [`OTSU_TIE_RTOL`] of the maximum wins; the threshold is the midpoint of the
/// two values on either side of the split.
pub fn otsu_threshold(losses: &[f64]) -> Result<OtsuSplit> {
    if losses.is_empty() {
        return Err(Error::Parameter("otsu_threshold needs at least one value".into()));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("otsu_threshold input must be finite".into()));
    }
    let mut v = losses.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if v[0] == v[n - 1] {
        return Ok(OtsuSplit {
            threshold: v[0],
            split_index: n,
        });
    }

    let total: f64 = v.iter().sum();
    let nf = n as f64;
    let mut low_sum = 0.0;
    let mut scores = Vec::with_capacity(n - 1);
    for k in 1..n {
        low_sum += v[k - 1];
        let kf = k as f64;
        let mu_low = low_sum / kf;
        let mu_high = (total - low_sum) / (nf - kf);
        let d = mu_low - mu_high;
        scores.push((kf / nf) * ((nf - kf) / nf) * d * d);
    }
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k = 1 + scores
        .iter()
        .position(|&s| s >= best - OTSU_TIE_RTOL * best)
        .expect("max is attained");
    Ok(OtsuSplit {
        threshold: 0.5 * (v[k - 1] + v[k]),
        split_index: k,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    /// Ascending id.
    pub easy: Vec<PatchId>,
    /// Descending loss; equal losses by descending id.
    pub hard: Vec<PatchId>,
    pub threshold: f64,
}

/// Hard means strictly above the Otsu threshold.
pub fn classify(reg: &LossRegistry) -> Result<Classification> {
    let losses: Vec<f64> = reg.entries.values().copied().collect();
    let split = otsu_threshold(&losses)?;
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for (&id, &loss) in &reg.entries {
        if loss > split.threshold {
            hard.push((id, loss));
        } else {
            easy.push(id);
        }
    }
    hard.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
    Ok(Classification {
        easy,
        hard: hard.into_iter().map(|(id, _)| id).collect(),
        threshold: split.threshold,
    })
}

/// The multiset of patches visited in one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub entries: Vec<PatchId>,
    pub counts: BTreeMap<PatchId, usize>,
    pub excluded: BTreeSet<PatchId>,
    /// Otsu threshold the plan was built with; `None` for a uniform plan.
    pub threshold: Option<f64>,
    pub hard_count: usize,
}

impl EpochPlan {
    /// Every id exactly once, shuffled.
    pub fn uniform<R: Rng + ?Sized>(ids: impl IntoIterator<Item = PatchId>, rng: &mut R) -> Self {
        let counts: BTreeMap<PatchId, usize> = ids.into_iter().map(|id| (id, 1)).collect();
        let mut entries: Vec<PatchId> = counts.keys().copied().collect();
        entries.shuffle(rng);
        Self {
            entries,
            counts,
            excluded: BTreeSet::new(),
            threshold: None,
            hard_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_epoch_plan<R: Rng + ?Sized>(
    reg: &LossRegistry,
    oversample_factor: usize,
    exclude_frac: f64,
    rng: &mut R,
) -> Result<EpochPlan> {
    if oversample_factor < 1 {
        return Err(Error::Parameter("oversample_factor must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&exclude_frac) {
        return Err(Error::Parameter(format!("exclude_frac {exclude_frac} must lie in [0, 1)")));
    }
    let cls = classify(reg)?;
    let n_excluded = (exclude_frac * cls.hard.len() as f64).floor() as usize;
    let excluded: BTreeSet<PatchId> = cls.hard[..n_excluded].iter().copied().collect();

    let mut counts = BTreeMap::new();
    for &id in &cls.easy {
        counts.insert(id, 1);
    }
    for &id in &cls.hard[n_excluded..] {
        counts.insert(id, oversample_factor);
    }
    let mut entries: Vec<PatchId> = counts
        .iter()
        .flat_map(|(&id, &c)| std::iter::repeat_n(id, c))
        .collect();
    entries.shuffle(rng);
    Ok(EpochPlan {
        entries,
        counts,
        excluded,
        threshold: Some(cls.threshold),
        hard_count: cls.hard.len(),
    })
}

/// Resumable training checkpoint of the curriculum state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpCheckpoint {
    pub epoch_tag: u32,
    pub entries: BTreeMap<PatchId, f64>,
    pub threshold: Option<f64>,
}

impl FpCheckpoint {
    pub fn new(reg: &LossRegistry, plan: Option<&EpochPlan>) -> Self {
        Self {
            epoch_tag: reg.epoch_tag,
            entries: reg.entries.clone(),
            threshold: plan.and_then(|p| p.threshold),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("bad checkpoint: {e}")))?;
        ck.registry()?;
        Ok(ck)
    }

    pub fn registry(&self) -> Result<LossRegistry> {
        let mut reg = LossRegistry::new();
        reg.merge(self.entries.iter().map(|(&k, &v)| (k, v)))?;
        reg.epoch_tag = self.epoch_tag;
        Ok(reg)
    }
}
