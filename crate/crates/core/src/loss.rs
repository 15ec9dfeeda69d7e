//! Scalar segmentation losses with analytic gradients.
//!
//! Every loss takes predicted probabilities `p` and a binary target `g` of the
//! same length, reduces over all voxels, and returns the value together with
//! `∂loss/∂p`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Clipping bound applied to probabilities inside BCE.
pub const PROB_CLIP: f64 = 1e-7;
/// Default stabilizer for the overlap losses.
pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub smooth: f64,
}

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64, smooth: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "tversky alpha={alpha}, beta={beta} must be >= 0 with a positive sum"
            )));
        }
        if !(smooth > 0.0 && smooth.is_finite()) {
            return Err(Error::Parameter(format!("smooth {smooth} must be > 0")));
        }
        Ok(Self { alpha, beta, smooth })
    }
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.7,
            smooth: DEFAULT_SMOOTH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_softdice: f64,
    pub w_tversky: f64,
}

impl LossWeights {
    pub fn new(w_ce: f64, w_softdice: f64, w_tversky: f64) -> Result<Self> {
        let w = Self {
            w_ce,
            w_softdice,
            w_tversky,
        };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<()> {
        let ws = [self.w_ce, self.w_softdice, self.w_tversky];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter(format!("loss weights {ws:?} must be finite and >= 0")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Parameter("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_softdice: 1.0,
            w_tversky: 1.0,
        }
    }
}

fn check_dims(p: &[f64], g: &[f64]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} voxels, target has {}",
            p.len(),
            g.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Dimension("empty patch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy on probabilities clipped to `[1e-7, 1 − 1e-7]`.
pub fn bce(p: &[f64], g: &[f64]) -> Result<LossValue> {
    check_dims(p, g)?;
    let n = p.len() as f64;
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| {
            let pc = pi.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            loss -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
            (pc - gi) / (n * pc * (1.0 - pc))
        })
        .collect();
    Ok(LossValue { loss: loss / n, grad })
}

/// `1 − (2Σpg + s) / (Σp + Σg + s)`.
pub fn dice_loss(p: &[f64], g: &[f64], smooth: f64) -> Result<LossValue> {
    check_dims(p, g)?;
    let (mut inter, mut sum) = (0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi * gi;
        sum += pi + gi;
    }
    let num = 2.0 * inter + smooth;
    let den = sum + smooth;
    let den2 = den * den;
    let grad = g.iter().map(|&gi| -(2.0 * gi * den - num) / den2).collect();
    Ok(LossValue {
        loss: 1.0 - num / den,
        grad,
    })
}

/// `1 − (2Σpg + s) / (Σp² + Σg² + s)`.
pub fn soft_dice_loss(p: &[f64], g: &[f64], smooth: f64) -> Result<LossValue> {
    check_dims(p, g)?;
    let (mut inter, mut sq) = (0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi * gi;
        sq += pi * pi + gi * gi;
    }
    let num = 2.0 * inter + smooth;
    let den = sq + smooth;
    let den2 = den * den;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| -(2.0 * gi * den - num * 2.0 * pi) / den2)
        .collect();
    Ok(LossValue {
        loss: 1.0 - num / den,
        grad,
    })
}

/// `1 − (TP + s) / (TP + α·FP + β·FN + s)`.
pub fn tversky_loss(p: &[f64], g: &[f64], params: &TverskyParams) -> Result<LossValue> {
    check_dims(p, g)?;
    let TverskyParams { alpha, beta, smooth } = *params;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        tp += pi * gi;
        fp += pi * (1.0 - gi);
        fneg += (1.0 - pi) * gi;
    }
    let num = tp + smooth;
    let den = tp + alpha * fp + beta * fneg + smooth;
    let den2 = den * den;
    let grad = g
        .iter()
        .map(|&gi| {
            let dden = gi + alpha * (1.0 - gi) - beta * gi;
            -(gi * den - num * dden) / den2
        })
        .collect();
    Ok(LossValue {
        loss: 1.0 - num / den,
        grad,
    })
}

/// Weighted sum of BCE, soft dice (smooth taken from `tversky`) and Tversky.
pub fn combined_loss(
    p: &[f64],
    g: &[f64],
    weights: &LossWeights,
    tversky: &TverskyParams,
) -> Result<LossValue> {
    weights.check()?;
    check_dims(p, g)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    let mut add = |w: f64, term: LossValue| {
        if w != 0.0 {
            loss += w * term.loss;
            for (acc, d) in grad.iter_mut().zip(term.grad) {
                *acc += w * d;
            }
        }
    };
    if weights.w_ce != 0.0 {
        add(weights.w_ce, bce(p, g)?);
    }
    if weights.w_softdice != 0.0 {
        add(weights.w_softdice, soft_dice_loss(p, g, tversky.smooth)?);
    }
    if weights.w_tversky != 0.0 {
        add(weights.w_tversky, tversky_loss(p, g, tversky)?);
    }
    Ok(LossValue { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_constants() {
        let p = vec![0.5; 10];
        let g: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        assert!((bce(&p, &g).unwrap().loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&g, &g).unwrap().loss < 1e-6);
        assert!(matches!(bce(&p, &g[..9]), Err(Error::Dimension(_))));
    }

    #[test]
    fn dice_hand_values() {
        // Σpg = 2, Σp = 3, Σg = 3
        let p = [1.0, 1.0, 1.0, 0.0];
        let g = [1.0, 1.0, 0.0, 1.0];
        assert!((dice_loss(&p, &g, 1e-15).unwrap().loss - 1.0 / 3.0).abs() < 1e-12);
        assert!(dice_loss(&g, &g, DEFAULT_SMOOTH).unwrap().loss < 1e-5);
        assert_eq!(dice_loss(&[0.0; 4], &[0.0; 4], DEFAULT_SMOOTH).unwrap().loss, 0.0);
    }

    #[test]
    fn soft_dice_hand_values() {
        // Σpg = 2, Σp² = 2.25, Σg² = 3
        let p = [1.0, 1.0, 0.5, 0.0];
        let g = [1.0, 1.0, 0.0, 1.0];
        assert!((soft_dice_loss(&p, &g, 1e-15).unwrap().loss - (1.0 - 4.0 / 5.25)).abs() < 1e-12);
        assert!(soft_dice_loss(&g, &g, DEFAULT_SMOOTH).unwrap().loss < 1e-5);
    }

    #[test]
    fn tversky_hand_values() {
        // TP = 2, FP = 1, FN = 1
        let p = [1.0, 1.0, 1.0, 0.0];
        let g = [1.0, 1.0, 0.0, 1.0];
        let t = TverskyParams {
            alpha: 0.3,
            beta: 0.7,
            smooth: 1e-15,
        };
        assert!((tversky_loss(&p, &g, &t).unwrap().loss - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn param_validation() {
        assert!(TverskyParams::new(0.0, 0.0, 1e-5).is_err());
        assert!(TverskyParams::new(-0.1, 1.0, 1e-5).is_err());
        assert!(TverskyParams::new(0.3, 0.7, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        let zero = LossWeights {
            w_ce: 0.0,
            w_softdice: 0.0,
            w_tversky: 0.0,
        };
        let err = combined_loss(&[0.5], &[1.0], &zero, &TverskyParams::default()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn combined_projections() {
        let p = [0.2, 0.7, 0.9, 0.4, 0.05];
        let g = [0.0, 1.0, 1.0, 0.0, 1.0];
        let t = TverskyParams::default();
        let only_ce = combined_loss(&p, &g, &LossWeights::new(1.0, 0.0, 0.0).unwrap(), &t).unwrap();
        assert_eq!(only_ce, bce(&p, &g).unwrap());
        let only_tv = combined_loss(&p, &g, &LossWeights::new(0.0, 0.0, 1.0).unwrap(), &t).unwrap();
        assert_eq!(only_tv, tversky_loss(&p, &g, &t).unwrap());
    }
}
