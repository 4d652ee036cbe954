//! Scalar losses. Natural log throughout; probabilities inside logs are floored
//! by [`DELTA`].

mod coda;

pub use coda::{evaluate_objective, AdvTerm, ObjectiveGrads, ObjectiveInputs, ObjectiveSettings, StopGrad};

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::tensor::{dot, l2_norm};

pub const DELTA: f64 = 1e-12;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(CodaError::Numerical(format!("invalid probability entries {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(CodaError::Numerical(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for ProbDist {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `−Σ label_c · ln(pred_c + δ)`; accepts soft labels.
pub fn cross_entropy(pred: &[f64], label: &[f64]) -> f64 {
    -pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { y * (p + DELTA).ln() })
        .sum::<f64>()
}

/// d cross_entropy / d pred.
pub fn cross_entropy_grad(pred: &[f64], label: &[f64]) -> Vec<f64> {
    pred.iter().zip(label).map(|(&p, &y)| -y / (p + DELTA)).collect()
}

pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * ((a + DELTA) / (b + DELTA)).ln() })
        .sum()
}

/// Partial derivatives of [`kl_div`] with respect to `p` and `q`.
pub fn kl_div_grad(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dp = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| ((a + DELTA) / (b + DELTA)).ln() + a / (a + DELTA))
        .collect();
    let dq = p.iter().zip(q).map(|(&a, &b)| -a / (b + DELTA)).collect();
    (dp, dq)
}

fn midpoint(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Jensen-Shannon divergence `½(KL(p‖m) + KL(q‖m))`, `m = (p+q)/2`.
pub fn js_div(p: &[f64], q: &[f64]) -> f64 {
    let m = midpoint(p, q);
    0.5 * (kl_div(p, &m) + kl_div(q, &m))
}

/// Partial derivatives of [`js_div`] with respect to `p` and `q`.
pub fn js_div_grad(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = midpoint(p, q);
    let side = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&m)
            .map(|(&a, &mc)| 0.5 * ((a + DELTA) / (mc + DELTA)).ln() + 0.5 * a / (a + DELTA) - 0.5 * mc / (mc + DELTA))
            .collect()
    };
    (side(p), side(q))
}

/// Consistency loss against an adversarially perturbed input, no label needed.
pub fn virtual_adversarial_loss(p_orig: &[f64], p_pert: &[f64]) -> f64 {
    js_div(p_pert, p_orig)
}

/// Divergence used for the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Js,
    /// `KL(p(x) ‖ p(x̂))`, kept for ablation.
    Kl,
}

impl Divergence {
    pub fn eval(self, p: &[f64], q: &[f64]) -> f64 {
        match self {
            Divergence::Js => js_div(p, q),
            Divergence::Kl => kl_div(p, q),
        }
    }

    pub fn grad(self, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Divergence::Js => js_div_grad(p, q),
            Divergence::Kl => kl_div_grad(p, q),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub adv_ce: f64,
    pub consistency: f64,
    pub contrast_self: f64,
    pub contrast_aug: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.ce,
            self.adv_ce,
            self.consistency,
            self.contrast_self,
            self.contrast_aug,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub adv_ce: f64,
    pub consistency: f64,
    pub contrast_self: f64,
    pub contrast_aug: f64,
}

/// `ce + α·adv_ce + β·consistency + λ·(contrast_self + contrast_aug)`.
pub fn total_objective(parts: LossParts, weights: LossWeights) -> LossBreakdown {
    let total = parts.ce
        + weights.alpha * parts.adv_ce
        + weights.beta * parts.consistency
        + weights.lambda * (parts.contrast_self + parts.contrast_aug);
    LossBreakdown {
        ce: parts.ce,
        adv_ce: parts.adv_ce,
        consistency: parts.consistency,
        contrast_self: parts.contrast_self,
        contrast_aug: parts.contrast_aug,
        total,
        weights,
    }
}

/// Cross-entropy on the original and transformed prediction plus their JS consistency.
pub fn consistency_objective(
    p_x: &[f64],
    p_xhat: &[f64],
    label: &[f64],
    alpha: f64,
    beta: f64,
) -> LossBreakdown {
    total_objective(
        LossParts {
            ce: cross_entropy(p_x, label),
            adv_ce: cross_entropy(p_xhat, label),
            consistency: js_div(p_x, p_xhat),
            ..Default::default()
        },
        LossWeights {
            alpha,
            beta,
            lambda: 0.0,
        },
    )
}

fn check_nonzero(v: &[f64]) -> Result<()> {
    if l2_norm(v) < crate::encoder::ZERO_NORM {
        return Err(CodaError::ZeroVector);
    }
    Ok(())
}

/// InfoNCE with cosine similarity (inputs are unit vectors, so a dot product).
///
/// `negatives` is a flat row-major list of unit vectors of the same dimension
/// as `q`. Returns the loss and its gradient with respect to `q`.
pub fn info_nce_with_grad(
    q: &[f64],
    k_pos: &[f64],
    negatives: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let dim = q.len();
    if k_pos.len() != dim || (dim > 0 && !negatives.len().is_multiple_of(dim)) {
        return Err(CodaError::Shape(format!(
            "info_nce dims: q {dim}, key {}, negatives {}",
            k_pos.len(),
            negatives.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(CodaError::Config(format!("temperature {tau} must be > 0")));
    }
    check_nonzero(q)?;
    check_nonzero(k_pos)?;

    let candidates: Vec<&[f64]> = std::iter::once(k_pos)
        .chain(negatives.chunks_exact(dim.max(1)))
        .collect();
    let logits: Vec<f64> = candidates.iter().map(|c| dot(q, c) / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let loss = -(logits[0] - max) + z.ln();

    let mut grad = vec![0.0; dim];
    for (c, w) in candidates.iter().zip(&weights) {
        let s = w / z;
        for (g, x) in grad.iter_mut().zip(c.iter()) {
            *g += s * x / tau;
        }
    }
    for (g, k) in grad.iter_mut().zip(k_pos) {
        *g -= k / tau;
    }
    Ok((loss, grad))
}

pub fn info_nce(q: &[f64], k_pos: &[f64], negatives: &[f64], tau: f64) -> Result<f64> {
    info_nce_with_grad(q, k_pos, negatives, tau).map(|(l, _)| l)
}

/// Self- and augment-contrastive terms against the same key and bank snapshot.
pub fn contrastive_objective(
    q: &[f64],
    q_aug: &[f64],
    k: &[f64],
    bank: &[f64],
    tau: f64,
) -> Result<(f64, f64)> {
    Ok((info_nce(q, k, bank, tau)?, info_nce(q_aug, k, bank, tau)?))
}

/// Backpropagates `d loss / d softmax(z)` to `d loss / d z`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pj, &dj)| pj * (dj - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).abs() < 1e-9);
        assert!((cross_entropy(&[0.5, 0.5], &[0.0, 1.0]) - LN_2).abs() < 1e-9);
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]) - LN_2).abs() < 1e-9);
    }

    #[test]
    fn kl_cases() {
        assert!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).abs() < 1e-9);
        assert!((kl_div(&[1.0, 0.0], &[0.5, 0.5]) - LN_2).abs() < 1e-9);
        let a = kl_div(&[0.9, 0.1], &[0.5, 0.5]);
        let b = kl_div(&[0.5, 0.5], &[0.9, 0.1]);
        // 0.9 ln 1.8 + 0.1 ln 0.2 and 0.5 ln(5/9) + 0.5 ln 5, evaluated by hand
        assert!((a - 0.368_064_207_168_497_1).abs() < 1e-9);
        assert!((b - 0.510_825_623_765_990_7).abs() < 1e-9);
        assert!((a - b).abs() > 0.1);
    }

    #[test]
    fn js_cases() {
        assert_eq!(js_div(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((js_div(&[1.0, 0.0], &[0.0, 1.0]) - LN_2).abs() < 1e-9);
        // m = (0.75, 0.25): ½[0.5 ln(2/3) + 0.5 ln 2] + ½[ln(4/3)]
        let expected = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        let v = js_div(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((v - expected).abs() < 1e-9);
        assert!((v - 0.215_762).abs() < 1e-6);
    }

    #[test]
    fn vat_delegates_to_js() {
        let (p, q) = ([0.3, 0.7], [0.6, 0.4]);
        assert_eq!(virtual_adversarial_loss(&p, &p), 0.0);
        assert_eq!(virtual_adversarial_loss(&p, &q), js_div(&p, &q));
        assert_eq!(virtual_adversarial_loss(&p, &q), virtual_adversarial_loss(&q, &p));
    }

    #[test]
    fn consistency_objective_cases() {
        let y = [0.0, 1.0];
        let b = consistency_objective(&[0.3, 0.7], &[0.6, 0.4], &y, 0.0, 0.0);
        assert_eq!(b.total, b.ce);
        let b = consistency_objective(&[0.3, 0.7], &[0.3, 0.7], &y, 1.0, 1.0);
        assert_eq!(b.consistency, 0.0);
        let b = consistency_objective(&y, &y, &y, 1.0, 1.0);
        assert!(b.total.abs() < 1e-9);
    }

    #[test]
    fn info_nce_cases() {
        let q = [1.0, 0.0];
        assert_eq!(info_nce(&q, &q, &[], 1.0).unwrap(), 0.0);
        // negative with the same similarity as the positive
        assert!((info_nce(&q, &q, &[1.0, 0.0], 1.0).unwrap() - LN_2).abs() < 1e-12);
        // q = k, one orthogonal key: −ln(e / (e + 1))
        let v = info_nce(&q, &q, &[0.0, 1.0], 1.0).unwrap();
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-9);
        assert!(matches!(info_nce(&[0.0, 0.0], &q, &[], 1.0), Err(CodaError::ZeroVector)));
        assert!(info_nce(&q, &q, &[1.0], 1.0).is_err());
    }

    #[test]
    fn contrastive_objective_cases() {
        let k = [1.0, 0.0];
        let q = [0.6, 0.8];
        let bank = [0.0, 1.0, -1.0, 0.0];
        let (a, b) = contrastive_objective(&q, &q, &k, &bank, 1.0).unwrap();
        assert_eq!(a, b);
        let (a, b) = contrastive_objective(&q, &[0.8, 0.6], &k, &[], 1.0).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let (a, _) = contrastive_objective(&k, &q, &k, &[0.0, 1.0], 1.0).unwrap();
        assert!((a - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn total_objective_weighting() {
        let parts = LossParts {
            ce: 0.7,
            adv_ce: 0.9,
            consistency: 0.2,
            contrast_self: 1.5,
            contrast_aug: 1.7,
        };
        let zero = total_objective(parts, LossWeights::default());
        assert_eq!(zero.total, 0.7);
        let no_contrast = total_objective(parts, LossWeights { alpha: 1.0, beta: 2.0, lambda: 0.0 });
        assert!((no_contrast.total - (0.7 + 0.9 + 0.4)).abs() < 1e-12);
        let contrast_only = total_objective(parts, LossWeights { alpha: 0.0, beta: 0.0, lambda: 0.03 });
        assert!((contrast_only.total - (0.7 + 0.03 * 3.2)).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-6 * (1.0 + num.abs()), "coord {i}: {num} vs {}", grad[i]);
        }
    }

    #[test]
    fn analytic_loss_gradients_match_finite_differences() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let (dp, dq) = js_div_grad(&p, &q);
        fd_check(|x| js_div(x, &q), &p, &dp);
        fd_check(|x| js_div(&p, x), &q, &dq);
        let (dp, dq) = kl_div_grad(&p, &q);
        fd_check(|x| kl_div(x, &q), &p, &dp);
        fd_check(|x| kl_div(&p, x), &q, &dq);
        fd_check(|x| cross_entropy(x, &[0.1, 0.6, 0.3]), &p, &cross_entropy_grad(&p, &[0.1, 0.6, 0.3]));

        let q = [0.6, 0.8];
        let (_, g) = info_nce_with_grad(&q, &[1.0, 0.0], &[0.0, 1.0, -0.6, 0.8], 0.5).unwrap();
        fd_check(|x| info_nce(x, &[1.0, 0.0], &[0.0, 1.0, -0.6, 0.8], 0.5).unwrap(), &q, &g);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8];
        let sm = |z: &[f64]| {
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let y = [0.0, 0.0, 1.0];
        let p = sm(&z);
        let dz = softmax_backward(&p, &cross_entropy_grad(&p, &y));
        fd_check(|x| cross_entropy(&sm(x), &y), &z, &dz);
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.4, 0.6]).is_ok());
        assert!(ProbDist::new(vec![0.4, 0.5]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
    }
}
