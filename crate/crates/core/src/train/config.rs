//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! `patch_size` takes either one integer (isotropic) or `z,y,x`.
//!
//! The default `batch_size` of 4 suits desk-scale runs. Large 3D networks on
//! GPUs typically run at 6 to 32 patches per batch, limited by device memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::focused::{DEFAULT_EXCLUDE_FRAC, DEFAULT_OVERSAMPLE_FACTOR};
use crate::loss::{LossWeights, TverskyParams, DEFAULT_SMOOTH};
use crate::patch::DEFAULT_SIGMA_SCALE;
use crate::volume::Shape;
use crate::{Error, Result};

pub const TOY_MODEL_NAME: &str = "toy-logistic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub w_ce: f64,
    pub w_softdice: f64,
    pub w_tversky: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub fp_enabled: bool,
    pub oversample_factor: usize,
    pub exclude_frac: f64,
    pub seed: u64,
    pub patch_size: Shape,
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TOY_MODEL_NAME.into(),
            epochs: 10,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd,
            base_lr: 3e-5,
            momentum: 0.99,
            weight_decay: 3e-5,
            w_ce: 1.0,
            w_softdice: 1.0,
            w_tversky: 1.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            fp_enabled: true,
            oversample_factor: DEFAULT_OVERSAMPLE_FACTOR,
            exclude_frac: DEFAULT_EXCLUDE_FRAC,
            seed: 0,
            patch_size: [32; 3],
            overlap: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Format(format!("config key {key}: expected true or false, got {v:?}"))),
    }
}

pub fn parse_shape(key: &str, v: &str) -> Result<Shape> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [s] => Ok([s; 3]),
        [z, y, x] => Ok([z, y, x]),
        _ => Err(Error::Format(format!("{key}: expected N or Z,Y,X, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "model" => c.model = v.to_string(),
                "epochs" => c.epochs = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "optimizer" => c.optimizer = v.parse()?,
                "base_lr" => c.base_lr = parse_num(k, v)?,
                "momentum" => c.momentum = parse_num(k, v)?,
                "weight_decay" => c.weight_decay = parse_num(k, v)?,
                "w_ce" => c.w_ce = parse_num(k, v)?,
                "w_softdice" => c.w_softdice = parse_num(k, v)?,
                "w_tversky" => c.w_tversky = parse_num(k, v)?,
                "tversky_alpha" => c.tversky_alpha = parse_num(k, v)?,
                "tversky_beta" => c.tversky_beta = parse_num(k, v)?,
                "fp_enabled" => c.fp_enabled = parse_bool(k, v)?,
                "oversample_factor" => c.oversample_factor = parse_num(k, v)?,
                "exclude_frac" => c.exclude_frac = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "patch_size" => c.patch_size = parse_shape(k, v)?,
                "overlap" => c.overlap = parse_num(k, v)?,
                _ => return Err(Error::Format(format!("line {}: unknown config key {k:?}", lineno + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let [pz, py, px] = self.patch_size;
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        };
        format!(
            "model={}\nepochs={}\nbatch_size={}\noptimizer={opt}\nbase_lr={}\nmomentum={}\nweight_decay={}\n\
             w_ce={}\nw_softdice={}\nw_tversky={}\ntversky_alpha={}\ntversky_beta={}\nfp_enabled={}\n\
             oversample_factor={}\nexclude_frac={}\nseed={}\npatch_size={pz},{py},{px}\noverlap={}\n",
            self.model,
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.momentum,
            self.weight_decay,
            self.w_ce,
            self.w_softdice,
            self.w_tversky,
            self.tversky_alpha,
            self.tversky_beta,
            self.fp_enabled,
            self.oversample_factor,
            self.exclude_frac,
            self.seed,
            self.overlap,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.model != TOY_MODEL_NAME {
            return Err(Error::Parameter(format!(
                "model {:?} is not available (only {TOY_MODEL_NAME})",
                self.model
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.oversample_factor == 0 {
            return Err(Error::Parameter("oversample_factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.exclude_frac) {
            return Err(Error::Parameter(format!("exclude_frac {} must lie in [0, 1)", self.exclude_frac)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Parameter(format!("overlap {} must lie in [0, 1)", self.overlap)));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Parameter("patch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Parameter(format!("base_lr {} must be > 0", self.base_lr)));
        }
        self.tversky()?;
        // zero weights are allowed here; the loss itself rejects them when used
        if [self.w_ce, self.w_softdice, self.w_tversky]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Parameter("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_ce: self.w_ce,
            w_softdice: self.w_softdice,
            w_tversky: self.w_tversky,
        }
    }

    pub fn tversky(&self) -> Result<TverskyParams> {
        TverskyParams::new(self.tversky_alpha, self.tversky_beta, DEFAULT_SMOOTH)
    }

    pub fn window(&self) -> super::WindowConfig {
        super::WindowConfig {
            patch_size: self.patch_size,
            overlap: self.overlap,
            sigma_scale: DEFAULT_SIGMA_SCALE,
        }
    }
}
