//! Contrastive (NT-Xent) and focal losses with analytic gradients.
//!
//! Both losses are evaluated in `f64` with a fixed sequential summation
//! order, whatever the storage type of their inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::MaskBatch;
use crate::model::{EmbeddingBatch, PredictionMap};
use crate::real::Real;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Added to each norm inside [`cosine_sim`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("NT-Xent needs an even, non-zero number of rows, got {0}")]
    BadRowCount(usize),
    #[error("shape mismatch: predictions {pred:?} vs targets {target:?}")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        target: (usize, usize, usize),
    },
    #[error("target value {0} is not binary")]
    NonBinaryTarget(u8),
    #[error("prediction {0} outside [0, 1]")]
    PredictionOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal weight of the positive class.
    pub alpha: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// NT-Xent temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            gamma: 2.0,
            tau: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "alpha = {} outside (0, 1)",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "gamma = {} must be >= 0",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "tau = {} must be > 0",
                self.tau
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a.b / ((|a| + eps)(|b| + eps))`, clamped to `[-1, 1]`. A zero vector
/// yields 0 rather than an error.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / ((norm(a) + NORM_EPS) * (norm(b) + NORM_EPS))).clamp(-1.0, 1.0)
}

/// Mean NT-Xent over all `2N` ordered positive pairs and its gradient with
/// respect to the (already normalized) rows.
///
/// Row `i`'s positive partner is `i ^ 1`; its denominator runs over every
/// row except `i` itself.
pub fn ntxent_loss<T: Real>(
    emb: &EmbeddingBatch<T>,
    tau: f64,
) -> Result<(T, EmbeddingBatch<T>), LossError> {
    let (n, d) = (emb.rows, emb.dim);
    if n == 0 || n % 2 != 0 {
        return Err(LossError::BadRowCount(n));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::InvalidConfig(format!("tau = {tau} must be > 0")));
    }
    let z: Vec<f64> = emb.data.iter().map(|v| v.to_f64_lossy()).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("embeddings"));
    }
    let rows: Vec<&[f64]> = z.chunks(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
    if let Some((row, &nrm)) = norms
        .iter()
        .enumerate()
        .find(|(_, &v)| (v - 1.0).abs() > 1e-4)
    {
        return Err(LossError::NotNormalized { row, norm: nrm });
    }

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in i + 1..n {
            let s = cosine_sim(rows[i], rows[k]);
            sim[i * n + k] = s;
            sim[k * n + i] = s;
        }
    }

    // dL/dsim for every ordered (i, k); sim is symmetric so both orders
    // feed the same entry below.
    let scale = 1.0 / n as f64;
    let mut dsim = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let j = i ^ 1;
        let logits: Vec<f64> = (0..n).map(|k| sim[i * n + k] / tau).collect();
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&k| k != i)
            .map(|k| (logits[k] - max).exp())
            .sum();
        let lse = max + denom.ln();
        total += lse - logits[j];
        for k in (0..n).filter(|&k| k != i) {
            let p = (logits[k] - lse).exp();
            let target = if k == j { 1.0 } else { 0.0 };
            dsim[i * n + k] += scale * (p - target) / tau;
        }
    }
    let loss = total * scale;

    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        for k in i + 1..n {
            let c = dsim[i * n + k] + dsim[k * n + i];
            if c == 0.0 {
                continue;
            }
            let (ai, ak) = (norms[i] + NORM_EPS, norms[k] + NORM_EPS);
            let ab = dot(rows[i], rows[k]);
            // d cos / d z_i = z_k / (a_i a_k) - (z_i . z_k) z_i / (a_i^2 a_k |z_i|)
            let (ci_self, ck_self) = (
                if norms[i] > 0.0 {
                    ab / (ai * ai * ak * norms[i])
                } else {
                    0.0
                },
                if norms[k] > 0.0 {
                    ab / (ak * ak * ai * norms[k])
                } else {
                    0.0
                },
            );
            let cross = 1.0 / (ai * ak);
            for t in 0..d {
                grad[i * d + t] += c * (rows[k][t] * cross - rows[i][t] * ci_self);
                grad[k * d + t] += c * (rows[i][t] * cross - rows[k][t] * ck_self);
            }
        }
    }
    Ok((
        T::of(loss),
        EmbeddingBatch::new(n, d, grad.into_iter().map(T::of).collect()),
    ))
}

fn check_prob(p: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LossError::PredictionOutOfRange(p));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Sum of focal terms divided by `norm`, and the gradient of that quantity
/// with respect to each (clamped) prediction. Used per item by the training
/// loop, where `norm` is the pixel count of the whole batch.
pub(crate) fn focal_terms<T: Real>(
    pred: &[T],
    target: &[u8],
    alpha: f64,
    gamma: f64,
    norm: f64,
) -> Result<(f64, Vec<T>), LossError> {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let p = check_prob(p.to_f64_lossy())?;
        let (term, dterm) = match y {
            1 => {
                let q = 1.0 - p;
                let w = alpha * q.powf(gamma);
                let dw = if gamma == 0.0 {
                    0.0
                } else {
                    -alpha * gamma * q.powf(gamma - 1.0)
                };
                (w * p.ln(), dw * p.ln() + w / p)
            }
            0 => {
                let w = (1.0 - alpha) * p.powf(gamma);
                let dw = if gamma == 0.0 {
                    0.0
                } else {
                    (1.0 - alpha) * gamma * p.powf(gamma - 1.0)
                };
                let l = (1.0 - p).ln();
                (w * l, dw * l - w / (1.0 - p))
            }
            other => return Err(LossError::NonBinaryTarget(other)),
        };
        total -= term / norm;
        grad.push(T::of(-dterm / norm));
    }
    Ok((total, grad))
}

/// Focal loss averaged over every pixel of every item:
///
/// `-(1/n) sum_i [ a (1-p_i)^g y_i log p_i + (1-a) p_i^g (1-y_i) log(1-p_i) ]`
///
/// with the analytic derivative with respect to each prediction.
pub fn focal_loss<T: Real>(
    pred: &PredictionMap<T>,
    target: &MaskBatch,
    alpha: f64,
    gamma: f64,
) -> Result<(T, Vec<T>), LossError> {
    let pshape = (pred.batch, pred.height, pred.width);
    let tshape = (target.batch, target.height, target.width);
    if pshape != tshape || pred.probs.len() != target.labels.len() {
        return Err(LossError::ShapeMismatch {
            pred: pshape,
            target: tshape,
        });
    }
    if pred.probs.is_empty() {
        return Err(LossError::ShapeMismatch {
            pred: pshape,
            target: tshape,
        });
    }
    if let Some(&bad) = target.labels.iter().find(|&&v| v > 1) {
        return Err(LossError::NonBinaryTarget(bad));
    }
    let n = pred.probs.len() as f64;
    let (loss, grad) = focal_terms(&pred.probs, &target.labels, alpha, gamma, n)?;
    Ok((T::of(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn pred(probs: Vec<f64>, h: usize, w: usize) -> PredictionMap<f64> {
        PredictionMap {
            batch: probs.len() / (h * w),
            height: h,
            width: w,
            probs,
        }
    }

    fn target(labels: Vec<u8>, h: usize, w: usize) -> MaskBatch {
        MaskBatch::new(labels.len() / (h * w), h, w, labels).unwrap()
    }

    #[test]
    fn cosine_reference_values() {
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-11);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!(
            (cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-11
        );
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let e = EmbeddingBatch::new(2, 3, vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0]);
        let (loss, grad) = ntxent_loss(&e, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ntxent_rejects_bad_input() {
        let unnormalized = EmbeddingBatch::new(2, 2, vec![2.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            ntxent_loss(&unnormalized, 0.5),
            Err(LossError::NotNormalized { row: 0, .. })
        ));
        let nan = EmbeddingBatch::new(2, 2, vec![f64::NAN, 0.0, 1.0, 0.0]);
        assert_eq!(
            ntxent_loss(&nan, 0.5).unwrap_err(),
            LossError::NonFinite("embeddings")
        );
        let odd = EmbeddingBatch::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            ntxent_loss(&odd, 0.5).unwrap_err(),
            LossError::BadRowCount(3)
        );
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(4);
        let (n, d) = (6, 5);
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d) {
            for v in row.iter_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let nrm = norm(row);
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let e = EmbeddingBatch::new(n, d, data.clone());
        let (_, grad) = ntxent_loss(&e, 0.3).unwrap();
        // Perturb along directions that keep the row on the unit sphere to
        // first order is unnecessary: cosine similarity is scale-invariant
        // and the norm check tolerates 1e-4.
        let h = 1e-6;
        for idx in 0..n * d {
            let mut plus = data.clone();
            plus[idx] += h;
            let mut minus = data.clone();
            minus[idx] -= h;
            let lp = ntxent_loss(&EmbeddingBatch::new(n, d, plus), 0.3)
                .unwrap()
                .0;
            let lm = ntxent_loss(&EmbeddingBatch::new(n, d, minus), 0.3)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data[idx]).abs() < 1e-7,
                "idx {idx}: fd {fd} vs {}",
                grad.data[idx]
            );
        }
    }

    #[test]
    fn ntxent_invariant_to_pair_permutation() {
        let mut rng = SplitMix64::new(8);
        let (pairs, d) = (4, 3);
        let mut data = vec![0.0; 2 * pairs * d];
        for row in data.chunks_mut(d) {
            row.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
            let nrm = norm(row);
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let base = ntxent_loss(&EmbeddingBatch::new(2 * pairs, d, data.clone()), 0.5)
            .unwrap()
            .0;
        let order = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&k| data[2 * k * d..2 * (k + 1) * d].to_vec())
            .collect();
        let other = ntxent_loss(&EmbeddingBatch::new(2 * pairs, d, permuted), 0.5)
            .unwrap()
            .0;
        assert!((base - other).abs() < 1e-9);
    }

    #[test]
    fn focal_hand_case() {
        let (loss, _) =
            focal_loss(&pred(vec![0.9], 1, 1), &target(vec![1], 1, 1), 0.4, 2.0).unwrap();
        let expected = -0.4 * 0.1f64.powi(2) * 0.9f64.ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 4.2144e-4).abs() < 1e-8);
    }

    #[test]
    fn focal_near_perfect_prediction() {
        let (loss, _) = focal_loss(
            &pred(vec![1.0 - PROB_EPS], 1, 1),
            &target(vec![1], 1, 1),
            0.4,
            2.0,
        )
        .unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(12);
        let probs: Vec<f64> = (0..16).map(|_| rng.uniform(0.05, 0.95)).collect();
        let labels: Vec<u8> = (0..16).map(|_| rng.bernoulli(0.5) as u8).collect();
        let t = target(labels, 4, 4);
        let (_, grad) = focal_loss(&pred(probs.clone(), 4, 4), &t, 0.4, 2.0).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut p = probs.clone();
            p[i] += h;
            let lp = focal_loss(&pred(p.clone(), 4, 4), &t, 0.4, 2.0).unwrap().0;
            p[i] -= 2.0 * h;
            let lm = focal_loss(&pred(p, 4, 4), &t, 0.4, 2.0).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6, "pixel {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn focal_decreases_in_confidence_for_positives() {
        let t = target(vec![1], 1, 1);
        let mut prev = f64::INFINITY;
        for k in 0..1000 {
            let p = PROB_EPS + (1.0 - 2.0 * PROB_EPS) * (k as f64 + 0.5) / 1000.0;
            let (l, _) = focal_loss(&pred(vec![p], 1, 1), &t, 0.4, 2.0).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn focal_errors_are_distinct() {
        let p = pred(vec![0.5; 4], 2, 2);
        assert!(matches!(
            focal_loss(&p, &target(vec![0; 2], 1, 2), 0.4, 2.0),
            Err(LossError::ShapeMismatch { .. })
        ));
        let bad_target = MaskBatch {
            batch: 1,
            height: 2,
            width: 2,
            labels: vec![0, 1, 2, 0],
        };
        assert_eq!(
            focal_loss(&p, &bad_target, 0.4, 2.0).unwrap_err(),
            LossError::NonBinaryTarget(2)
        );
        let out_of_range = pred(vec![0.5, 1.5, 0.5, 0.5], 2, 2);
        assert_eq!(
            focal_loss(&out_of_range, &target(vec![0; 4], 2, 2), 0.4, 2.0).unwrap_err(),
            LossError::PredictionOutOfRange(1.5)
        );
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            gamma: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
