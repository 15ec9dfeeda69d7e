//! Epoch orchestration with a three-parameter voxelwise logistic model.
//!
//! One call to [`fit`] runs, per epoch: learning rate from the previous
//! validation dice → epoch plan (uniform on epoch 1 or with the curriculum
//! off) → mini-batch training → sliding-window validation.

mod config;
mod optim;

pub use config::{parse_shape, TrainConfig, TOY_MODEL_NAME};
pub use optim::{adam_step, adamw_step, lr_for_epoch, sgd_step, OptimizerKind, OptimizerState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::focused::{build_epoch_plan, EpochPlan, LossRegistry, PatchId};
use crate::inference::{threshold_prob, DEFAULT_THRESHOLD};
use crate::loss::{combined_loss, LossWeights, TverskyParams};
use crate::metrics::dice_coefficient;
use crate::patch::{compute_grid, extract_volume_patch, gaussian_weight_map, sliding_window_infer, PatchPredictor, PatchTensor};
use crate::volume::{normalize_zscore, stack_channels, FlipAxes, MultiChannelVolume, Shape, Volume3D, VolumeKind};
use crate::{Error, Result};

/// `p = σ(w_ct·ct + w_pet·pet + bias)` per voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub w_ct: f64,
    pub w_pet: f64,
    pub bias: f64,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ToyModel {
    pub const N_PARAMS: usize = 3;

    pub fn params(&self) -> [f64; 3] {
        [self.w_ct, self.w_pet, self.bias]
    }

    pub fn from_params(p: [f64; 3]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("model parameters {p:?} are not finite")));
        }
        Ok(Self {
            w_ct: p[0],
            w_pet: p[1],
            bias: p[2],
        })
    }

    pub fn predict_voxels(&self, ct: &[f32], pet: &[f32]) -> Vec<f64> {
        ct.iter()
            .zip(pet)
            .map(|(&c, &p)| logistic(self.w_ct * c as f64 + self.w_pet * p as f64 + self.bias))
            .collect()
    }

    /// Combined loss on one patch and its gradient with respect to the
    /// parameters: `∂L/∂w = Σ ∂L/∂pᵢ · pᵢ(1 − pᵢ) · xᵢ`.
    pub fn loss_and_grad(&self, ct: &[f32], pet: &[f32], mask: &[f32], loss: &LossConfig) -> Result<(f64, [f64; 3])> {
        let p = self.predict_voxels(ct, pet);
        let g: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        let lv = combined_loss(&p, &g, &loss.weights, &loss.tversky)?;
        let mut grad = [0.0; 3];
        for i in 0..p.len() {
            let s = lv.grad[i] * p[i] * (1.0 - p[i]);
            grad[0] += s * ct[i] as f64;
            grad[1] += s * pet[i] as f64;
            grad[2] += s;
        }
        Ok((lv.loss, grad))
    }
}

impl PatchPredictor for ToyModel {
    /// Expects channel 0 = CT, channel 1 = PET; other layouts yield no output.
    fn predict(&self, patch: &PatchTensor) -> Vec<f32> {
        if patch.num_channels() != 2 {
            return Vec::new();
        }
        self.predict_voxels(patch.channel(0), patch.channel(1))
            .into_iter()
            .map(|p| p as f32)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub tversky: TverskyParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub patch_size: Shape,
    pub overlap: f64,
    pub sigma_scale: f64,
}

/// A normalized, channel-stacked case with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseVolumes {
    pub id: String,
    pub image: MultiChannelVolume,
    pub mask: Volume3D,
}

impl CaseVolumes {
    /// Z-scores CT and PET separately and stacks them.
    pub fn from_raw(id: impl Into<String>, ct: &Volume3D, pet: &Volume3D, mask: Volume3D) -> Result<Self> {
        mask.require_kind(VolumeKind::Mask, "case mask")?;
        let image = stack_channels(normalize_zscore(ct)?, normalize_zscore(pet)?)?;
        if mask.shape() != image.shape() {
            return Err(Error::Dimension(format!(
                "mask shape {:?} != image shape {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPatch {
    pub id: PatchId,
    pub case_id: String,
    pub origin: [usize; 3],
    pub image: MultiChannelVolume,
    pub mask: Volume3D,
}

/// Training patches, fixed once at extraction time. `PatchId(i)` is the i-th patch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchStore {
    patches: Vec<TrainPatch>,
}

impl PatchStore {
    /// Crops every case on the same grid used at inference time.
    pub fn extract(cases: &[CaseVolumes], patch_size: Shape, overlap: f64) -> Result<Self> {
        let mut patches = Vec::new();
        for case in cases {
            let grid = compute_grid(case.image.shape(), patch_size, overlap)?;
            let spacing = case.image.spacing();
            for &origin in grid.origins() {
                let channels = case
                    .image
                    .channels()
                    .iter()
                    .map(|c| Volume3D::new(patch_size, spacing, extract_volume_patch(c, origin, patch_size)?, VolumeKind::Image))
                    .collect::<Result<Vec<_>>>()?;
                let mask = Volume3D::new(
                    patch_size,
                    spacing,
                    extract_volume_patch(&case.mask, origin, patch_size)?,
                    VolumeKind::Mask,
                )?;
                patches.push(TrainPatch {
                    id: PatchId(patches.len() as u32),
                    case_id: case.id.clone(),
                    origin,
                    image: MultiChannelVolume::new(channels)?,
                    mask,
                });
            }
        }
        Ok(Self { patches })
    }

    pub fn from_patches(patches: Vec<TrainPatch>) -> Result<Self> {
        for (i, p) in patches.iter().enumerate() {
            if p.id != PatchId(i as u32) {
                return Err(Error::Data(format!("patch at position {i} has id {}", p.id)));
            }
        }
        Ok(Self { patches })
    }

    pub fn get(&self, id: PatchId) -> Option<&TrainPatch> {
        self.patches.get(id.0 as usize)
    }

    pub fn ids(&self) -> impl Iterator<Item = PatchId> + '_ {
        self.patches.iter().map(|p| p.id)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    /// Per-visit losses in visit order; later visits of the same id win.
    pub loss_updates: Vec<(PatchId, f64)>,
    pub mean_loss: f64,
}

/// One pass over `plan` in plan order.
///
/// Each mini-batch draws one random flip per patch (from `rng`, in order),
/// evaluates patches in parallel, then applies a single optimizer step on the
/// batch-mean gradient.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut ToyModel,
    plan: &EpochPlan,
    store: &PatchStore,
    loss: &LossConfig,
    opt: &mut OptimizerState,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochOutcome> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let patches = plan
        .entries
        .iter()
        .map(|&id| store.get(id).ok_or_else(|| Error::Data(format!("plan references unknown patch {id}"))))
        .collect::<Result<Vec<_>>>()?;
    if patches.iter().any(|p| p.image.num_channels() != 2) {
        return Err(Error::Data("toy model patches need exactly two channels".into()));
    }

    let mut loss_updates = Vec::with_capacity(patches.len());
    let mut params = model.params();
    for batch in patches.chunks(batch_size) {
        let flips: Vec<FlipAxes> = batch.iter().map(|_| FlipAxes::sample(rng)).collect();
        let current = ToyModel::from_params(params)?;
        let results = batch
            .par_iter()
            .zip(&flips)
            .map(|(p, flip)| {
                let image = flip.apply_multi(&p.image);
                let mask = flip.apply(&p.mask);
                current.loss_and_grad(image.channel(0).data(), image.channel(1).data(), mask.data(), loss)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = [0.0; 3];
        for (p, (l, g)) in batch.iter().zip(&results) {
            loss_updates.push((p.id, *l));
            for k in 0..3 {
                grad[k] += g[k];
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        opt.step(&mut params, &grad)?;
    }
    *model = ToyModel::from_params(params)?;

    let mean_loss = if loss_updates.is_empty() {
        0.0
    } else {
        loss_updates.iter().map(|(_, l)| l).sum::<f64>() / loss_updates.len() as f64
    };
    Ok(EpochOutcome { loss_updates, mean_loss })
}

/// Mean dice (percent) of thresholded predictions over `cases`.
pub fn mean_dice_pct<F>(cases: &[CaseVolumes], mut predict: F) -> Result<f64>
where
    F: FnMut(&CaseVolumes) -> Result<Volume3D>,
{
    if cases.is_empty() {
        return Err(Error::Parameter("validation set is empty".into()));
    }
    let mut total = 0.0;
    for case in cases {
        let prob = predict(case)?;
        let mask = threshold_prob(&prob, DEFAULT_THRESHOLD)?;
        total += dice_coefficient(&mask, &case.mask)?;
    }
    Ok((100.0 * total / cases.len() as f64).clamp(0.0, 100.0))
}

pub fn validate(model: &ToyModel, cases: &[CaseVolumes], window: &WindowConfig) -> Result<f64> {
    let wmap = gaussian_weight_map(window.patch_size, window.sigma_scale)?;
    mean_dice_pct(cases, |c| sliding_window_infer(&c.image, model, window.overlap, &wmap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_dice_pct: f64,
    pub lr_used: f64,
    pub plan_len: usize,
    pub hard_count: usize,
    pub excluded_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub model: ToyModel,
    pub stats: Vec<EpochStats>,
    pub registry: LossRegistry,
}

/// Runs `config.epochs` epochs from a zero-initialized model.
pub fn fit(config: &TrainConfig, store: &PatchStore, val: &[CaseVolumes]) -> Result<FitOutcome> {
    config.validate()?;
    let loss = LossConfig {
        weights: config.loss_weights(),
        tversky: config.tversky()?,
    };
    let window = config.window();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ToyModel::default();
    let mut opt = OptimizerState::new(
        config.optimizer,
        ToyModel::N_PARAMS,
        config.base_lr,
        config.momentum,
        config.weight_decay,
    )?;
    let mut registry = LossRegistry::new();
    let mut stats = Vec::with_capacity(config.epochs);
    let mut prev_dice = 0.0;

    for epoch in 1..=config.epochs {
        opt.lr = lr_for_epoch(config.base_lr, prev_dice)?;
        let plan = if config.fp_enabled && !registry.is_empty() {
            build_epoch_plan(&registry, config.oversample_factor, config.exclude_frac, &mut rng)?
        } else {
            EpochPlan::uniform(store.ids(), &mut rng)
        };
        let outcome = train_epoch(&mut model, &plan, store, &loss, &mut opt, config.batch_size, &mut rng)?;
        registry.merge(outcome.loss_updates)?;
        registry.set_epoch_tag(epoch as u32);
        let dice = validate(&model, val, &window)?;
        stats.push(EpochStats {
            epoch,
            mean_train_loss: outcome.mean_loss,
            val_dice_pct: dice,
            lr_used: opt.lr,
            plan_len: plan.len(),
            hard_count: plan.hard_count,
            excluded_count: plan.excluded.len(),
        });
        prev_dice = dice;
    }
    Ok(FitOutcome { model, stats, registry })
}

/// JSON lines, one [`EpochStats`] per line.
pub fn stats_to_jsonl(stats: &[EpochStats]) -> String {
    stats
        .iter()
        .map(|s| serde_json::to_string(s).expect("stats serialization cannot fail") + "\n")
        .collect()
}

/// Validation dice (percent) the comparison harness measures convergence against.
pub const FP_COMPARISON_TARGET_PCT: f64 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpRun {
    pub seed: u64,
    pub fp_enabled: bool,
    /// First epoch whose validation dice reached the target, if any.
    pub epochs_to_target: Option<usize>,
    pub final_dice_pct: f64,
    pub final_model: ToyModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpComparisonReport {
    pub target_dice_pct: f64,
    pub epochs: usize,
    pub runs: Vec<FpRun>,
}

/// Trains with the curriculum on and off for each seed on the same data.
pub fn compare_fp(config: &TrainConfig, store: &PatchStore, val: &[CaseVolumes], seeds: &[u64]) -> Result<FpComparisonReport> {
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for fp_enabled in [true, false] {
            let cfg = TrainConfig {
                seed,
                fp_enabled,
                ..config.clone()
            };
            let out = fit(&cfg, store, val)?;
            runs.push(FpRun {
                seed,
                fp_enabled,
                epochs_to_target: out
                    .stats
                    .iter()
                    .find(|s| s.val_dice_pct >= FP_COMPARISON_TARGET_PCT)
                    .map(|s| s.epoch),
                final_dice_pct: out.stats.last().map_or(0.0, |s| s.val_dice_pct),
                final_model: out.model,
            });
        }
    }
    Ok(FpComparisonReport {
        target_dice_pct: FP_COMPARISON_TARGET_PCT,
        epochs: config.epochs,
        runs,
    })
}

/// Trained model as written by `fp-volseg train` and read by `infer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: String,
    pub params: ToyModel,
    pub patch_size: Shape,
    pub overlap: f64,
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("bad model checkpoint: {e}")))?;
        if ck.model != TOY_MODEL_NAME {
            return Err(Error::Format(format!("unsupported model {:?}", ck.model)));
        }
        ToyModel::from_params(ck.params.params())?;
        Ok(ck)
    }
}
