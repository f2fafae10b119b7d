//! Negative log-likelihood and the consistency enforcing loss.
//!
//! Both losses consume the log-probabilities produced by the network's final
//! log-softmax node and return the scalar value together with the gradient
//! w.r.t. those log-probabilities, so the graph's backward pass completes the
//! chain to the parameters. The consistency enforcing loss adds a forward KL
//! term from a detached reference distribution to the current prediction.

use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

/// Floor applied to log-probabilities inside both losses. Keeps the
/// zero-avoiding forward KL finite when the prediction collapses.
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// Reference predictions treated as constants: no gradient flows into them.
#[derive(Debug, Clone)]
pub struct ReferenceDistribution {
    probs: Vec<f64>,
    batch: usize,
    classes: usize,
}

impl ReferenceDistribution {
    /// Validates rows are distributions (entries >= 0, sums within 1e-9).
    pub fn new(probs: Vec<f64>, batch: usize, classes: usize) -> Result<Self> {
        if probs.len() != batch * classes {
            return Err(DcaError::Dimension(format!(
                "reference wants {}x{} entries, got {}",
                batch,
                classes,
                probs.len()
            )));
        }
        for r in 0..batch {
            let row = &probs[r * classes..(r + 1) * classes];
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(DcaError::Data(format!(
                    "reference row {} has negative or non-finite entries",
                    r
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DcaError::Data(format!(
                    "reference row {} sums to {}, expected 1",
                    r, sum
                )));
            }
        }
        Ok(ReferenceDistribution { probs, batch, classes })
    }

    /// Build from a log-probability tensor (e.g. a previous forward pass).
    pub fn from_log_probs(log_probs: &Tensor) -> Result<Self> {
        let (b, c) = (log_probs.rows(), log_probs.cols());
        let probs = log_probs.data.iter().map(|&lp| lp.exp()).collect();
        Self::new(probs, b, c)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.classes..(r + 1) * self.classes]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Scalar loss plus its gradient w.r.t. the log-probabilities, and the
/// number of log-prob entries that hit the probability floor.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_log_probs: Tensor,
    pub clamped: usize,
}

fn check_log_probs(log_probs: &Tensor) -> Result<(usize, usize)> {
    if log_probs.shape.len() != 2 || log_probs.shape[1] < 2 {
        return Err(DcaError::Dimension(format!(
            "loss expects log-probs [batch, C>=2], got {:?}",
            log_probs.shape
        )));
    }
    if !log_probs.is_finite() {
        return Err(DcaError::Numeric("loss input contains NaN/Inf".into()));
    }
    Ok((log_probs.shape[0], log_probs.shape[1]))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(DcaError::Dimension(format!(
            "{} labels for batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DcaError::Data(format!(
            "label {} out of range for {} classes",
            bad, classes
        )));
    }
    Ok(())
}

/// Mean over the batch of `-log p(y|x)`, differentiable w.r.t. the logits
/// through the log-prob gradient.
pub fn nll(log_probs: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (batch, classes) = check_log_probs(log_probs)?;
    check_labels(labels, batch, classes)?;
    let inv_b = 1.0 / batch as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; batch * classes];
    let mut clamped = 0;
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_probs.data[r * classes + y];
        if lp < LOG_PROB_FLOOR {
            value -= LOG_PROB_FLOOR * inv_b;
            clamped += 1; // gradient of a clamped entry is zero
        } else {
            value -= lp * inv_b;
            grad[r * classes + y] = -inv_b;
        }
    }
    Ok(LossOutput {
        value,
        grad_log_probs: Tensor::from_rows(batch, classes, grad)?,
        clamped,
    })
}

/// Consistency enforcing loss: `nll + kl_weight * mean_b KL(ref || p)` with
/// the forward KL `sum_c ref_c (log ref_c - log p_c)`. The reference is
/// detached; gradient flows only through `log_probs`.
pub fn cel(
    log_probs: &Tensor,
    labels: &[usize],
    reference: &ReferenceDistribution,
    kl_weight: f64,
) -> Result<LossOutput> {
    let (batch, classes) = check_log_probs(log_probs)?;
    check_labels(labels, batch, classes)?;
    if reference.batch() != batch || reference.classes() != classes {
        return Err(DcaError::Dimension(format!(
            "reference is {}x{}, log-probs are {}x{}",
            reference.batch(),
            reference.classes(),
            batch,
            classes
        )));
    }
    let mut out = nll(log_probs, labels)?;
    let inv_b = 1.0 / batch as f64;
    let mut kl_total = 0.0;
    for r in 0..batch {
        let refr = reference.row(r);
        for c in 0..classes {
            let p_ref = refr[c];
            if p_ref == 0.0 {
                continue; // 0 * log(0/q) contributes nothing
            }
            let lp = log_probs.data[r * classes + c];
            if lp < LOG_PROB_FLOOR {
                kl_total += p_ref * (p_ref.ln() - LOG_PROB_FLOOR);
                out.clamped += 1;
            } else {
                kl_total += p_ref * (p_ref.ln() - lp);
                out.grad_log_probs.data[r * classes + c] -= kl_weight * p_ref * inv_b;
            }
        }
    }
    out.value += kl_weight * kl_total * inv_b;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_probs_of(probs: &[f64], batch: usize, classes: usize) -> Tensor {
        let data = probs.iter().map(|&p| p.ln()).collect();
        Tensor::from_rows(batch, classes, data).unwrap()
    }

    #[test]
    fn uniform_prediction_nll_is_log_c() {
        let c = 10;
        let lp = log_probs_of(&vec![0.1; c], 1, c);
        let out = nll(&lp, &[3]).unwrap();
        assert!((out.value - 10.0f64.ln()).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_nll() {
        let lp = log_probs_of(&[1.0 - 1e-9, 1e-9], 1, 2);
        let out = nll(&lp, &[0]).unwrap();
        assert!(out.value.abs() < 1e-8);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn nll_on_known_batch_matches_hand_computation() {
        let lp = log_probs_of(&[0.7, 0.3, 0.2, 0.8], 2, 2);
        let out = nll(&lp, &[0, 0]).unwrap();
        let expect = -((0.7f64.ln() + 0.2f64.ln()) / 2.0);
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let lp = log_probs_of(&[0.5, 0.5], 1, 2);
        assert!(matches!(nll(&lp, &[2]), Err(DcaError::Data(_))));
    }

    #[test]
    fn cel_with_matching_reference_reduces_to_nll() {
        let probs = [0.2, 0.5, 0.3, 0.6, 0.1, 0.3];
        let lp = log_probs_of(&probs, 2, 3);
        let r = ReferenceDistribution::from_log_probs(&lp).unwrap();
        let a = nll(&lp, &[1, 0]).unwrap();
        let b = cel(&lp, &[1, 0], &r, 1.0).unwrap();
        assert!((a.value - b.value).abs() < 1e-12, "{} vs {}", a.value, b.value);
    }

    #[test]
    fn cel_one_hot_reference_hand_case() {
        // ref = (1,0), p = (0.5,0.5), label 0: loss = ln2 + ln2
        let lp = log_probs_of(&[0.5, 0.5], 1, 2);
        let r = ReferenceDistribution::new(vec![1.0, 0.0], 1, 2).unwrap();
        let out = cel(&lp, &[0], &r, 1.0).unwrap();
        assert!((out.value - 2.0 * 2.0f64.ln()).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn kl_term_matches_high_precision_reference() {
        // KL((0.3,0.7) || (0.6,0.4)) computed in extended precision:
        // 0.3*ln(0.3/0.6) + 0.7*ln(0.7/0.4) = 0.18378689738681217
        let lp = log_probs_of(&[0.6, 0.4], 1, 2);
        let r = ReferenceDistribution::new(vec![0.3, 0.7], 1, 2).unwrap();
        let base = nll(&lp, &[0]).unwrap();
        let with_kl = cel(&lp, &[0], &r, 1.0).unwrap();
        let kl = with_kl.value - base.value;
        assert!((kl - 0.18378689738681217).abs() < 1e-10, "{}", kl);
    }

    #[test]
    fn kl_is_nonnegative_and_cel_dominates_nll() {
        let cases: &[(&[f64], &[f64])] = &[
            (&[0.1, 0.9], &[0.9, 0.1]),
            (&[0.25, 0.75], &[0.5, 0.5]),
            (&[0.999, 0.001], &[0.001, 0.999]),
        ];
        for (p, pref) in cases {
            let lp = log_probs_of(p, 1, 2);
            let r = ReferenceDistribution::new(pref.to_vec(), 1, 2).unwrap();
            let a = nll(&lp, &[0]).unwrap();
            let b = cel(&lp, &[0], &r, 1.0).unwrap();
            assert!(b.value >= a.value - 1e-12);
        }
    }

    #[test]
    fn one_hot_reference_uniform_prediction_gives_log_c() {
        let c = 4;
        let lp = log_probs_of(&vec![0.25; c], 1, c);
        let r = ReferenceDistribution::new(vec![1.0, 0.0, 0.0, 0.0], 1, c).unwrap();
        let base = nll(&lp, &[0]).unwrap();
        let out = cel(&lp, &[0], &r, 1.0).unwrap();
        assert!(((out.value - base.value) - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn collapsed_prediction_clamps_instead_of_diverging() {
        // p nearly one-hot, uniform reference: log p of the tiny class hits
        // the floor; the loss stays finite and the clamp is reported.
        let tiny = 1e-300;
        let lp = Tensor::from_rows(1, 2, vec![(1.0f64 - tiny).ln(), tiny.ln()]).unwrap();
        let r = ReferenceDistribution::new(vec![0.5, 0.5], 1, 2).unwrap();
        let out = cel(&lp, &[0], &r, 1.0).unwrap();
        assert!(out.value.is_finite());
        assert!(out.clamped >= 1);
        // the clamped coordinate carries no gradient
        assert_eq!(out.grad_log_probs.data[1], 0.0);
    }

    #[test]
    fn zero_reference_entries_contribute_nothing() {
        let lp = log_probs_of(&[0.5, 0.25, 0.25], 1, 3);
        let r = ReferenceDistribution::new(vec![0.0, 1.0, 0.0], 1, 3).unwrap();
        let out = cel(&lp, &[0], &r, 1.0).unwrap();
        // KL = 1 * (ln 1 - ln 0.25) = ln 4
        let base = nll(&lp, &[0]).unwrap();
        assert!(((out.value - base.value) - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(out.grad_log_probs.data[0], base.grad_log_probs.data[0]);
        assert_eq!(out.grad_log_probs.data[2], 0.0);
    }
}
