//! SGD with momentum, Adam and AdamW over a flat parameter slice.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            _ => Err(Error::Parameter(format!("unknown optimizer {s:?} (sgd, adam, adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or Adam's β1.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD velocity, or Adam's first moment.
    pub m: Vec<f64>,
    /// Adam's second moment (unused by SGD).
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let s = Self {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step_count: 0,
        };
        s.check_hyper()?;
        Ok(s)
    }

    fn check_hyper(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Parameter(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }

    fn check(&self, params: &[f64], grads: &[f64]) -> Result<()> {
        self.check_hyper()?;
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} params, {} grads, optimizer sized for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {grads:?}")));
        }
        Ok(())
    }

    /// Dispatches on `kind`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self),
            OptimizerKind::Adam => adam_step(params, grads, self),
            OptimizerKind::AdamW => adamw_step(params, grads, self),
        }
    }
}

/// `v ← μv − lr(g + λθ); θ ← θ + v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    state.check(params, grads)?;
    for ((theta, &g), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()) {
        *v = state.momentum * *v - state.lr * (g + state.weight_decay * *theta);
        *theta += *v;
    }
    state.step_count += 1;
    Ok(())
}

fn adam_update(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, decoupled: bool) -> Result<()> {
    state.check(params, grads)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.momentum, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, theta) in params.iter_mut().enumerate() {
        let g = if decoupled {
            grads[i]
        } else {
            grads[i] + state.weight_decay * *theta
        };
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        if decoupled {
            *theta -= state.lr * state.weight_decay * *theta;
        }
        *theta -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam with L2 decay folded into the gradient.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    adam_update(params, grads, state, false)
}

/// Adam with decoupled weight decay.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    adam_update(params, grads, state, true)
}

/// `base_lr · 0.9^(dice/10)` with `dice` the validation dice in percent.
pub fn lr_for_epoch(base_lr: f64, val_dice_pct: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&val_dice_pct) {
        return Err(Error::Range(format!("validation dice {val_dice_pct} is outside [0, 100]")));
    }
    Ok(base_lr * 0.9f64.powf(val_dice_pct / 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(kind: OptimizerKind, lr: f64, momentum: f64, wd: f64) -> OptimizerState {
        OptimizerState::new(kind, 1, lr, momentum, wd).unwrap()
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = state(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        let mut p = [1.0];
        sgd_step(&mut p, &[2.0], &mut s).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = state(OptimizerKind::Sgd, 3e-5, 0.99, 0.0);
        let mut p = [0.5];
        sgd_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((s.m[0] + 3e-5).abs() < 1e-18);
        assert!((p[0] - (0.5 - 3e-5)).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((s.m[0] + 5.97e-5).abs() < 1e-17);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::AdamW] {
            let mut s = OptimizerState::new(kind, 3, 1e-2, 0.99, 0.0).unwrap();
            let mut p = [0.3, -1.2, 4.0];
            for _ in 0..20 {
                s.step(&mut p, &[0.0; 3]).unwrap();
            }
            assert_eq!(p, [0.3, -1.2, 4.0], "{kind:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = state(OptimizerKind::Adam, 1e-3, 0.99, 0.0);
        let mut p = [0.0];
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_and_adamw_agree_without_decay() {
        let mut a = state(OptimizerKind::Adam, 1e-2, 0.9, 0.0);
        let mut w = state(OptimizerKind::AdamW, 1e-2, 0.9, 0.0);
        let (mut pa, mut pw) = ([0.7], [0.7]);
        for g in [0.3, -1.0, 2.5, 0.1] {
            adam_step(&mut pa, &[g], &mut a).unwrap();
            adamw_step(&mut pw, &[g], &mut w).unwrap();
            assert_eq!(pa, pw);
        }
        // with decay they part ways
        let mut a = state(OptimizerKind::Adam, 1e-2, 0.9, 0.1);
        let mut w = state(OptimizerKind::AdamW, 1e-2, 0.9, 0.1);
        let (mut pa, mut pw) = ([0.7], [0.7]);
        adam_step(&mut pa, &[0.3], &mut a).unwrap();
        adamw_step(&mut pw, &[0.3], &mut w).unwrap();
        assert_ne!(pa, pw);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = state(OptimizerKind::Sgd, 0.1, 0.0, 0.0);
        assert!(matches!(sgd_step(&mut [0.0], &[f64::NAN], &mut s), Err(Error::Numeric(_))));
        assert!(matches!(sgd_step(&mut [0.0, 1.0], &[0.0, 0.0], &mut s), Err(Error::Dimension(_))));
        assert!(OptimizerState::new(OptimizerKind::Sgd, 1, 0.0, 0.9, 0.0).is_err());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_for_epoch(3e-5, 0.0).unwrap(), 3e-5);
        assert!((lr_for_epoch(3e-5, 10.0).unwrap() - 2.7e-5).abs() < 1e-15);
        assert!((lr_for_epoch(3e-5, 100.0).unwrap() - 1.04604e-5).abs() < 1e-10);
        assert!(matches!(lr_for_epoch(3e-5, 100.5), Err(Error::Range(_))));
        assert!(lr_for_epoch(3e-5, -1.0).is_err());
    }
}
