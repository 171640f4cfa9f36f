//! Combined soft-Dice + cross-entropy loss with its exact gradient through
//! the softmax.
//!
//! For class probabilities `p` and a one-hot target `g` over a batch of `N`
//! voxels:
//!
//! ```text
//! L_dice = 1 - mean_{c >= 1} (2 Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)
//! L_ce   = -(1/N) Σ_v log(max(p_true(v), floor))
//! L      = λ_d L_dice + λ_ce L_ce
//! ```
//!
//! Background (class 0) is left out of the Dice term and kept in CE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub smooth: f64,
    pub ce_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 1.0,
            ce_weight: 1.0,
            smooth: 1e-5,
            ce_floor: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dice_weight < 0.0
            || self.ce_weight < 0.0
            || self.dice_weight + self.ce_weight == 0.0
        {
            return Err(Error::invalid("loss weights must be >= 0 and not both 0"));
        }
        if self.smooth.is_nan() || self.smooth <= 0.0 {
            return Err(Error::invalid("dice smoothing must be > 0"));
        }
        if !(self.ce_floor > 0.0 && self.ce_floor < 1.0) {
            return Err(Error::invalid("cross-entropy floor must lie in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Row-wise numerically stable softmax of `n x k` logits.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Loss and its gradient with respect to the logits that produced `probs`.
///
/// `probs` holds `n x k` voxel-major softmax outputs and `target` the `n`
/// true class ids.
pub fn loss_and_grad(
    probs: &[f64],
    target: &[u8],
    k: usize,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<f64>)> {
    cfg.validate()?;
    if k < 2 || probs.len() != target.len() * k {
        return Err(Error::invalid(format!(
            "{} probabilities for {} voxels x {k} classes",
            probs.len(),
            target.len()
        )));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!("target class {t} out of range")));
    }
    let n = target.len();
    let eps = cfg.smooth;

    // Dice sums per class.
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for (row, &t) in probs.chunks_exact(k).zip(target) {
        for c in 0..k {
            psum[c] += row[c];
        }
        inter[t as usize] += row[t as usize];
        gsum[t as usize] += 1.0;
    }
    let fg = (k - 1) as f64;
    let mut dice_mean = 0.0;
    for c in 1..k {
        dice_mean += (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
    }
    dice_mean /= fg;
    let l_dice = 1.0 - dice_mean;

    let mut l_ce = 0.0;
    for (row, &t) in probs.chunks_exact(k).zip(target) {
        l_ce -= row[t as usize].max(cfg.ce_floor).ln();
    }
    l_ce /= n as f64;

    // dL/dp, then through the softmax Jacobian.
    let mut grad = vec![0.0; probs.len()];
    let mut dl_dp = vec![0.0; k];
    for (v, (row, &t)) in probs.chunks_exact(k).zip(target).enumerate() {
        for c in 0..k {
            dl_dp[c] = 0.0;
            if c >= 1 && cfg.dice_weight != 0.0 {
                let denom = psum[c] + gsum[c] + eps;
                let g = (c == t as usize) as u8 as f64;
                let d_dice = (2.0 * g * denom - (2.0 * inter[c] + eps)) / (denom * denom);
                dl_dp[c] -= cfg.dice_weight * d_dice / fg;
            }
        }
        let pt = row[t as usize];
        if cfg.ce_weight != 0.0 && pt > cfg.ce_floor {
            dl_dp[t as usize] -= cfg.ce_weight / (n as f64 * pt);
        }
        let dot: f64 = (0..k).map(|c| row[c] * dl_dp[c]).sum();
        for c in 0..k {
            grad[v * k + c] = row[c] * (dl_dp[c] - dot);
        }
    }

    let value = LossValue {
        total: cfg.dice_weight * l_dice + cfg.ce_weight * l_ce,
        dice: l_dice,
        ce: l_ce,
    };
    Ok((value, grad))
}

/// [`loss_and_grad`] over whole maps.
pub fn loss_and_grad_map(
    probs: &ProbMap,
    target: &LabelMap,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<f64>)> {
    if probs.classes() != target.classes() || probs.dims() != target.dims() {
        return Err(Error::invalid(
            "probability map and target differ in classes or dims",
        ));
    }
    let k = probs.classes().len();
    let mut rows = Vec::with_capacity(probs.len() * k);
    for v in 0..probs.len() {
        for c in 0..k as u8 {
            rows.push(probs.prob(v, c) as f64);
        }
    }
    loss_and_grad(&rows, target.data(), k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_no_dice_loss() {
        let target = [0u8, 1, 2, 2, 1, 0];
        let mut probs = vec![0.0; target.len() * 3];
        for (v, &t) in target.iter().enumerate() {
            probs[v * 3 + t as usize] = 1.0;
        }
        let cfg = LossConfig {
            ce_weight: 0.0,
            ..Default::default()
        };
        let (l, _) = loss_and_grad(&probs, &target, 3, &cfg).unwrap();
        assert!(l.total.abs() < 1e-4);
    }

    #[test]
    fn uniform_cross_entropy_is_ln3() {
        let target = [0u8, 1, 2, 1];
        let probs = vec![1.0 / 3.0; 12];
        let cfg = LossConfig {
            dice_weight: 0.0,
            ..Default::default()
        };
        let (l, _) = loss_and_grad(&probs, &target, 3, &cfg).unwrap();
        assert!((l.total - 3f64.ln()).abs() < 1e-12);
        assert!((l.total - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn plain_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.0, 0.5, -0.5];
        let probs = softmax_rows(&logits, 3);
        let target = [2u8, 0];
        let cfg = LossConfig {
            dice_weight: 0.0,
            ..Default::default()
        };
        let (_, g) = loss_and_grad(&probs, &target, 3, &cfg).unwrap();
        for v in 0..2 {
            for c in 0..3 {
                let y = (c == target[v] as usize) as u8 as f64;
                assert!((g[v * 3 + c] - (probs[v * 3 + c] - y) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let both_zero = LossConfig {
            dice_weight: 0.0,
            ce_weight: 0.0,
            ..Default::default()
        };
        assert!(both_zero.validate().is_err());
        let no_smooth = LossConfig {
            smooth: 0.0,
            ..Default::default()
        };
        assert!(no_smooth.validate().is_err());
        assert!(loss_and_grad(&[0.5, 0.5], &[3], 2, &LossConfig::default()).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let a = softmax_rows(&[1.0, 2.0, 3.0], 3);
        let b = softmax_rows(&[1001.0, 1002.0, 1003.0], 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
