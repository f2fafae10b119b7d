//! Evaluation metrics: predictive quality (accuracy, NLL, ECE, Brier),
//! OOD detection (FPR@95, detection error, AUROC, AUPR-in/out), and
//! prediction diversity across ensemble members (pairwise KL, classwise
//! variance, Jensen-Shannon divergence).

use crate::error::{DcaError, Result};
use crate::tensor::{softmax, Tensor};
use serde::{Deserialize, Serialize};

/// Probability floor used inside logarithms, mirroring the loss module.
const PROB_FLOOR: f64 = 1e-12;

/// Per-sample categorical predictive distributions, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    probs: Vec<f64>,
    n: usize,
    classes: usize,
    labels: Option<Vec<usize>>,
}

impl ProbBatch {
    pub fn new(
        probs: Vec<f64>,
        n: usize,
        classes: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if probs.len() != n * classes {
            return Err(DcaError::Dimension(format!(
                "prob batch wants {}x{} entries, got {}",
                n,
                classes,
                probs.len()
            )));
        }
        if let Some(ls) = &labels {
            if ls.len() != n {
                return Err(DcaError::Dimension(format!(
                    "{} labels for {} samples",
                    ls.len(),
                    n
                )));
            }
            if let Some(&bad) = ls.iter().find(|&&y| y >= classes) {
                return Err(DcaError::Data(format!(
                    "label {} out of range for {} classes",
                    bad, classes
                )));
            }
        }
        for r in 0..n {
            let row = &probs[r * classes..(r + 1) * classes];
            if row.iter().any(|&p| !p.is_finite() || p < 0.0 || p > 1.0 + 1e-9) {
                return Err(DcaError::Data(format!("row {} is not a probability vector", r)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(DcaError::Data(format!("row {} sums to {}, expected 1", r, sum)));
            }
        }
        Ok(ProbBatch { probs, n, classes, labels })
    }

    pub fn from_logits(logits: &Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let p = softmax(logits)?;
        Self::new(p.data, logits.rows(), logits.cols(), labels)
    }

    pub fn from_log_probs(log_probs: &Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let probs = log_probs.data.iter().map(|&lp| lp.exp()).collect();
        Self::new(probs, log_probs.rows(), log_probs.cols(), labels)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.classes..(r + 1) * self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| DcaError::Data("metric needs labels, batch has none".into()))
    }

    /// Highest predicted probability per sample (the confidence score).
    pub fn confidences(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Argmax class per sample; ties resolve to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.n)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// In-domain vs out-of-domain score sets; higher score = more in-domain.
#[derive(Debug, Clone)]
pub struct OodScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

/// How OOD scores are derived from the aggregated prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScoreKind {
    /// Max class probability (default).
    MaxProb,
    /// Negated predictive entropy.
    NegEntropy,
}

impl OodScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(DcaError::Data("OOD metrics need non-empty score sets".into()));
        }
        if in_scores.iter().chain(&out_scores).any(|v| !v.is_finite()) {
            return Err(DcaError::Numeric("OOD scores must be finite".into()));
        }
        Ok(OodScoreSet { in_scores, out_scores })
    }

    pub fn from_batches(
        in_batch: &ProbBatch,
        out_batch: &ProbBatch,
        kind: OodScoreKind,
    ) -> Result<Self> {
        let score = |b: &ProbBatch| -> Vec<f64> {
            match kind {
                OodScoreKind::MaxProb => b.confidences(),
                OodScoreKind::NegEntropy => (0..b.len())
                    .map(|r| {
                        b.row(r)
                            .iter()
                            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                            .sum::<f64>()
                    })
                    .collect(),
            }
        };
        Self::new(score(in_batch), score(out_batch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
    pub ece_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodMetrics>,
}

impl MetricsReport {
    /// One-row CSV rendering: header line and value line.
    pub fn to_csv(&self) -> (String, String) {
        let mut header = String::from("accuracy,nll,ece,brier,ece_bins");
        let mut row = format!(
            "{},{},{},{},{}",
            self.accuracy, self.nll, self.ece, self.brier, self.ece_bins
        );
        if let Some(o) = &self.ood {
            header.push_str(",fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out");
            row.push_str(&format!(
                ",{},{},{},{},{}",
                o.fpr_at_95_tpr, o.detection_error, o.auroc, o.aupr_in, o.aupr_out
            ));
        }
        (header, row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub pairwise_kl: f64,
    pub classwise_variance: f64,
    pub js_divergence: f64,
}

impl DiversityReport {
    pub fn to_csv(&self) -> (String, String) {
        (
            "pairwise_kl,classwise_variance,js_divergence".to_string(),
            format!(
                "{},{},{}",
                self.pairwise_kl, self.classwise_variance, self.js_divergence
            ),
        )
    }
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(batch: &ProbBatch) -> Result<f64> {
    let labels = batch.require_labels()?;
    let preds = batch.predictions();
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Mean negative log-likelihood with the 1e-12 probability floor.
pub fn nll(batch: &ProbBatch) -> Result<f64> {
    let labels = batch.require_labels()?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total -= batch.row(r)[y].max(PROB_FLOOR).ln();
    }
    Ok(total / batch.len() as f64)
}

/// Expected calibration error over equal-width confidence bins on the max
/// probability. Empty bins contribute nothing.
pub fn ece(batch: &ProbBatch, bins: usize) -> Result<f64> {
    let labels = batch.require_labels()?;
    if bins == 0 {
        return Err(DcaError::Data("ece needs at least one bin".into()));
    }
    let confidences = batch.confidences();
    let preds = batch.predictions();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for r in 0..batch.len() {
        let b = ((confidences[r] * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += confidences[r];
        if preds[r] == labels[r] {
            hit_sum[b] += 1.0;
        }
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let m = count[b] as f64;
        total += (m / n) * ((hit_sum[b] / m) - (conf_sum[b] / m)).abs();
    }
    Ok(total)
}

/// Mean over samples of the squared distance between the predicted
/// distribution and the one-hot label.
pub fn brier(batch: &ProbBatch) -> Result<f64> {
    let labels = batch.require_labels()?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        for (c, &p) in batch.row(r).iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            total += (p - target) * (p - target);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Confusion counts at descending thresholds. Entry k holds the cumulative
/// (threshold, tp, fp) after admitting all scores >= the k-th distinct
/// pooled score.
struct Sweep {
    points: Vec<(f64, usize, usize)>,
    n_pos: usize,
    n_neg: usize,
}

fn sweep(pos: &[f64], neg: &[f64]) -> Sweep {
    let mut pooled: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let mut tp = 0;
    let mut fp = 0;
    let mut i = 0;
    while i < pooled.len() {
        let threshold = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == threshold {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((threshold, tp, fp));
    }
    Sweep { points, n_pos: pos.len(), n_neg: neg.len() }
}

/// AUROC as the Mann-Whitney rank statistic: midranks over the pooled
/// sample, ties counted half.
pub fn auroc(scores: &OodScoreSet) -> f64 {
    let n_in = scores.in_scores.len();
    let n_out = scores.out_scores.len();
    let mut pooled: Vec<(f64, bool)> = scores
        .in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.out_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks are 1-based; a tie group [i, j) shares the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &pooled[i..j] {
            if item.1 {
                rank_sum_in += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_in - (n_in * (n_in + 1)) as f64 / 2.0;
    u / (n_in as f64 * n_out as f64)
}

/// ROC polyline from (0,0) to (1,1) as (fpr, tpr) pairs at descending
/// thresholds, ties grouped.
pub fn roc_points(scores: &OodScoreSet) -> Vec<(f64, f64)> {
    let sw = sweep(&scores.in_scores, &scores.out_scores);
    let mut pts = vec![(0.0, 0.0)];
    for &(_, tp, fp) in &sw.points {
        pts.push((fp as f64 / sw.n_neg as f64, tp as f64 / sw.n_pos as f64));
    }
    pts
}

/// Average precision with step-wise (not interpolated) integration over
/// descending thresholds: sum of (R_k - R_{k-1}) * P_k.
fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let sw = sweep(pos, neg);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(_, tp, fp) in &sw.points {
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / sw.n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// The five OOD detection metrics. Thresholding is `score >= tau` with
/// in-domain as the positive class; AUPR-out flips the sign and the roles
/// so OOD becomes positive.
pub fn ood_metrics(scores: &OodScoreSet) -> OodMetrics {
    let sw = sweep(&scores.in_scores, &scores.out_scores);
    let n_pos = sw.n_pos as f64;
    let n_neg = sw.n_neg as f64;

    // FPR at the tightest threshold still reaching 95% TPR: walking
    // thresholds downward, the first point with TPR >= 0.95.
    let mut fpr_at_95 = 1.0;
    for &(_, tp, fp) in &sw.points {
        if tp as f64 / n_pos >= 0.95 {
            fpr_at_95 = fp as f64 / n_neg;
            break;
        }
    }

    // min over thresholds of (FPR + FNR) / 2, including the classify-nothing
    // threshold (FPR 0, FNR 1).
    let mut detection_error: f64 = 0.5;
    for &(_, tp, fp) in &sw.points {
        let fpr = fp as f64 / n_neg;
        let fnr = 1.0 - tp as f64 / n_pos;
        detection_error = detection_error.min((fpr + fnr) / 2.0);
    }

    let aupr_in = average_precision(&scores.in_scores, &scores.out_scores);
    let neg_out: Vec<f64> = scores.out_scores.iter().map(|&s| -s).collect();
    let neg_in: Vec<f64> = scores.in_scores.iter().map(|&s| -s).collect();
    let aupr_out = average_precision(&neg_out, &neg_in);

    OodMetrics {
        fpr_at_95_tpr: fpr_at_95,
        detection_error,
        auroc: auroc(scores),
        aupr_in,
        aupr_out,
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pc, &qc) in p.iter().zip(q) {
        if pc > 0.0 {
            total += pc * (pc / qc.max(PROB_FLOOR)).ln();
        }
    }
    total
}

/// Diversity of M aligned per-model prediction batches, averaged over the
/// evaluation set: mean pairwise KL over ordered pairs, Bessel-corrected
/// classwise variance summed over classes, and the generalized JS
/// divergence (mean KL to the mixture).
pub fn diversity(per_model: &[ProbBatch]) -> Result<DiversityReport> {
    let m = per_model.len();
    if m < 2 {
        return Err(DcaError::Data(format!("diversity needs >= 2 models, got {}", m)));
    }
    let n = per_model[0].len();
    let classes = per_model[0].classes();
    for b in per_model {
        if b.len() != n || b.classes() != classes {
            return Err(DcaError::Dimension(
                "diversity batches must align on the same inputs".into(),
            ));
        }
    }
    let mut d_pw = 0.0;
    let mut d_var = 0.0;
    let mut d_js = 0.0;
    let mut mixture = vec![0.0; classes];
    for r in 0..n {
        let rows: Vec<&[f64]> = per_model.iter().map(|b| b.row(r)).collect();

        for i in 0..m {
            for j in 0..m {
                if i != j {
                    d_pw += kl(rows[i], rows[j]);
                }
            }
        }

        for c in 0..classes {
            let mean = rows.iter().map(|p| p[c]).sum::<f64>() / m as f64;
            let ss = rows.iter().map(|p| (p[c] - mean) * (p[c] - mean)).sum::<f64>();
            d_var += ss / (m - 1) as f64;
        }

        for c in 0..classes {
            mixture[c] = rows.iter().map(|p| p[c]).sum::<f64>() / m as f64;
        }
        for p in &rows {
            d_js += kl(p, &mixture);
        }
    }
    let nf = n as f64;
    Ok(DiversityReport {
        pairwise_kl: d_pw / (m * (m - 1)) as f64 / nf,
        classwise_variance: d_var / nf,
        js_divergence: d_js / m as f64 / nf,
    })
}

/// Element-wise mean of aligned probability batches. Labels are taken from
/// the first batch that has them.
pub fn aggregate_predictions(per_proposal: &[ProbBatch]) -> Result<ProbBatch> {
    if per_proposal.is_empty() {
        return Err(DcaError::Data("cannot aggregate zero prediction batches".into()));
    }
    let n = per_proposal[0].len();
    let classes = per_proposal[0].classes();
    for b in per_proposal {
        if b.len() != n || b.classes() != classes {
            return Err(DcaError::Dimension("aggregation batches must align".into()));
        }
    }
    let m = per_proposal.len() as f64;
    let mut probs = vec![0.0; n * classes];
    for b in per_proposal {
        for (acc, &p) in probs.iter_mut().zip(b.probs()) {
            *acc += p;
        }
    }
    for p in probs.iter_mut() {
        *p /= m;
    }
    let labels = per_proposal.iter().find_map(|b| b.labels().map(|l| l.to_vec()));
    ProbBatch::new(probs, n, classes, labels)
}

/// Mean of aligned logit tensors followed by softmax: the logit-space
/// aggregation alternative.
pub fn aggregate_logits(per_proposal: &[Tensor], labels: Option<Vec<usize>>) -> Result<ProbBatch> {
    if per_proposal.is_empty() {
        return Err(DcaError::Data("cannot aggregate zero logit batches".into()));
    }
    let shape = per_proposal[0].shape.clone();
    let mut mean = vec![0.0; per_proposal[0].numel()];
    for t in per_proposal {
        if t.shape != shape {
            return Err(DcaError::Dimension("logit batches must align".into()));
        }
        for (acc, &v) in mean.iter_mut().zip(&t.data) {
            *acc += v;
        }
    }
    let m = per_proposal.len() as f64;
    for v in mean.iter_mut() {
        *v /= m;
    }
    ProbBatch::from_logits(&Tensor::new(shape, mean)?, labels)
}

/// Full in-domain report for a labeled batch.
pub fn report(batch: &ProbBatch, ece_bins: usize) -> Result<MetricsReport> {
    Ok(MetricsReport {
        accuracy: accuracy(batch)?,
        nll: nll(batch)?,
        ece: ece(batch, ece_bins)?,
        brier: brier(batch)?,
        ece_bins,
        ood: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(probs: &[f64], n: usize, c: usize, labels: &[usize]) -> ProbBatch {
        ProbBatch::new(probs.to_vec(), n, c, Some(labels.to_vec())).unwrap()
    }

    #[test]
    fn perfect_onehot_predictions_have_zero_ece_and_brier() {
        let b = batch(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0, 1]);
        assert_eq!(ece(&b, 15).unwrap(), 0.0);
        assert_eq!(brier(&b).unwrap(), 0.0);
        assert_eq!(accuracy(&b).unwrap(), 1.0);
    }

    #[test]
    fn ece_matches_hand_binned_computation() {
        let b = batch(&[0.6, 0.4, 0.7, 0.3, 0.9, 0.1, 1.0, 0.0], 4, 2, &[0, 1, 0, 0]);
        // bins=4 over [0,1]: bin [0.5,0.75) holds conf 0.6, 0.7 (acc 1/2,
        // conf 0.65); bin [0.75,1] holds conf 0.9, 1.0 (acc 1, conf 0.95)
        let expect = 0.5 * (0.5f64 - 0.65).abs() + 0.5 * (1.0f64 - 0.95).abs();
        assert!((ece(&b, 4).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn single_bin_ece_is_accuracy_confidence_gap() {
        let b = batch(&[0.8, 0.2, 0.55, 0.45, 0.7, 0.3], 3, 2, &[0, 1, 0]);
        let conf_mean: f64 = (0.8 + 0.55 + 0.7) / 3.0;
        let acc: f64 = 2.0 / 3.0;
        assert!((ece(&b, 1).unwrap() - (acc - conf_mean).abs()).abs() < 1e-12);
    }

    #[test]
    fn missing_labels_is_data_error() {
        let b = ProbBatch::new(vec![0.5, 0.5], 1, 2, None).unwrap();
        assert!(matches!(ece(&b, 15), Err(DcaError::Data(_))));
        assert!(matches!(brier(&b), Err(DcaError::Data(_))));
    }

    #[test]
    fn uniform_prediction_brier_closed_form() {
        let c = 10;
        let b = batch(&vec![0.1; c], 1, c, &[4]);
        assert!((brier(&b).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn brier_matches_naive_oracle_on_random_batch() {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let mut state = 88172645463325252u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let (n, c) = (20, 4);
        for r in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| next() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
            labels.push(r % c);
        }
        let b = batch(&probs, n, c, &labels);
        let mut oracle = 0.0;
        for r in 0..n {
            for cc in 0..c {
                let t = if cc == labels[r] { 1.0 } else { 0.0 };
                let d = probs[r * c + cc] - t;
                oracle += d * d;
            }
        }
        oracle /= n as f64;
        assert!((brier(&b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn perfectly_separated_scores_hit_the_ideal_metrics() {
        let s = OodScoreSet::new(vec![0.9, 0.8, 0.95], vec![0.1, 0.2, 0.3]).unwrap();
        let m = ood_metrics(&s);
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.fpr_at_95_tpr, 0.0);
        assert_eq!(m.detection_error, 0.0);
        assert_eq!(m.aupr_in, 1.0);
        assert_eq!(m.aupr_out, 1.0);
    }

    #[test]
    fn all_ties_give_half_auroc() {
        let s = OodScoreSet::new(vec![0.5; 10], vec![0.5; 7]).unwrap();
        assert_eq!(auroc(&s), 0.5);
        assert!(ood_metrics(&s).detection_error <= 0.5 + 1e-12);
    }

    #[test]
    fn empty_score_set_is_data_error() {
        assert!(matches!(OodScoreSet::new(vec![], vec![0.1]), Err(DcaError::Data(_))));
    }

    #[test]
    fn auroc_equals_exhaustive_pair_ranking() {
        let s =
            OodScoreSet::new(vec![0.9, 0.4, 0.7, 0.4, 0.55], vec![0.3, 0.4, 0.6, 0.2]).unwrap();
        let mut total = 0.0;
        for &a in &s.in_scores {
            for &b in &s.out_scores {
                if a > b {
                    total += 1.0;
                } else if a == b {
                    total += 0.5;
                }
            }
        }
        let expect = total / (s.in_scores.len() * s.out_scores.len()) as f64;
        assert!((auroc(&s) - expect).abs() < 1e-15);
    }

    #[test]
    fn roc_trapezoid_matches_rank_auroc() {
        let s = OodScoreSet::new(
            vec![0.91, 0.52, 0.77, 0.52, 0.33, 0.68],
            vec![0.52, 0.41, 0.6, 0.2, 0.33],
        )
        .unwrap();
        let pts = roc_points(&s);
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        }
        assert!((area - auroc(&s)).abs() < 1e-12);
    }

    #[test]
    fn diversity_of_identical_batches_is_zero() {
        let b = ProbBatch::new(vec![0.2, 0.5, 0.3, 0.7, 0.1, 0.2], 2, 3, None).unwrap();
        let rep = diversity(&[b.clone(), b.clone(), b]).unwrap();
        assert!(rep.pairwise_kl.abs() <= 1e-12);
        assert!(rep.classwise_variance.abs() <= 1e-12);
        assert!(rep.js_divergence.abs() <= 1e-12);
    }

    #[test]
    fn two_model_diversity_matches_direct_formulas() {
        // p1=(0.9,0.1), p2=(0.1,0.9), one input
        let p1 = ProbBatch::new(vec![0.9, 0.1], 1, 2, None).unwrap();
        let p2 = ProbBatch::new(vec![0.1, 0.9], 1, 2, None).unwrap();
        let rep = diversity(&[p1, p2]).unwrap();
        let kl12 = 0.9 * (0.9f64 / 0.1).ln() + 0.1 * (0.1f64 / 0.9).ln();
        assert!((rep.pairwise_kl - kl12).abs() < 1e-12);
        let dvar = 2.0 * ((0.9f64 - 0.5).powi(2) + (0.1f64 - 0.5).powi(2));
        assert!((rep.classwise_variance - dvar).abs() < 1e-12);
        let js = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((rep.js_divergence - js).abs() < 1e-12);
    }

    #[test]
    fn single_model_diversity_is_data_error() {
        let b = ProbBatch::new(vec![0.5, 0.5], 1, 2, None).unwrap();
        assert!(matches!(diversity(&[b]), Err(DcaError::Data(_))));
    }

    #[test]
    fn misaligned_diversity_batches_are_dimension_error() {
        let a = ProbBatch::new(vec![0.5, 0.5], 1, 2, None).unwrap();
        let b = ProbBatch::new(vec![0.5, 0.5, 0.4, 0.6], 2, 2, None).unwrap();
        assert!(matches!(diversity(&[a, b]), Err(DcaError::Dimension(_))));
    }

    #[test]
    fn aggregation_identity_and_midpoint() {
        let a = ProbBatch::new(vec![1.0, 0.0], 1, 2, None).unwrap();
        let same = aggregate_predictions(&[a.clone()]).unwrap();
        assert_eq!(same.probs(), a.probs());
        let b = ProbBatch::new(vec![0.0, 1.0], 1, 2, None).unwrap();
        let mid = aggregate_predictions(&[a, b]).unwrap();
        assert_eq!(mid.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn aggregation_matches_independent_mean() {
        let batches: Vec<ProbBatch> = (0..4)
            .map(|i| {
                let p = 0.1 + 0.2 * i as f64;
                ProbBatch::new(vec![p, 1.0 - p], 1, 2, None).unwrap()
            })
            .collect();
        let agg = aggregate_predictions(&batches).unwrap();
        let mean0 = (0.1 + 0.3 + 0.5 + 0.7) / 4.0;
        assert!((agg.row(0)[0] - mean0).abs() < 1e-15);
        assert!((agg.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_aggregation_is_data_error() {
        assert!(matches!(aggregate_predictions(&[]), Err(DcaError::Data(_))));
    }

    #[test]
    fn ece_is_invariant_under_sample_permutation() {
        let probs = [0.6, 0.4, 0.9, 0.1, 0.55, 0.45, 0.8, 0.2];
        let labels = [0usize, 0, 1, 1];
        let b1 = batch(&probs, 4, 2, &labels);
        let permuted = [0.8, 0.2, 0.55, 0.45, 0.6, 0.4, 0.9, 0.1];
        let plabels = [1usize, 1, 0, 0];
        let b2 = batch(&permuted, 4, 2, &plabels);
        assert_eq!(ece(&b1, 5).unwrap(), ece(&b2, 5).unwrap());
    }

    #[test]
    fn report_serializes_with_exact_field_names() {
        let r = MetricsReport {
            accuracy: 0.9,
            nll: 0.3,
            ece: 0.02,
            brier: 0.1,
            ece_bins: 15,
            ood: Some(OodMetrics {
                fpr_at_95_tpr: 0.1,
                detection_error: 0.08,
                auroc: 0.95,
                aupr_in: 0.9,
                aupr_out: 0.97,
            }),
        };
        let json = serde_json::to_string(&r).unwrap();
        for key in [
            "accuracy",
            "nll",
            "ece",
            "brier",
            "fpr_at_95_tpr",
            "detection_error",
            "auroc",
            "aupr_in",
            "aupr_out",
        ] {
            assert!(json.contains(&format!("\"{}\"", key)), "missing {} in {}", key, json);
        }
    }
}
