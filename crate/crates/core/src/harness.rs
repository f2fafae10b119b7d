//! Experiment orchestration: in-domain comparison, distributional shift,
//! OOD detection, the three ablations (granularity, loss, instance count),
//! and per-member analysis of modelwise banks.
//!
//! Every cell is reproducible from (config, seed): training consumes its own
//! seeded streams, and evaluation re-seeds a fresh proposal RNG from the
//! cell's seed, so re-evaluating the same model on the same data is
//! bit-identical no matter which experiment asks.

use crate::bank::DcaParameterBank;
use crate::data::{corrupt, CorruptionKind, CorruptionSpec, Dataset};
use crate::dcwa::average_weights;
use crate::error::{DcaError, Result};
use crate::metrics::{
    aggregate_logits, aggregate_predictions, diversity, ood_metrics, report, roc_points,
    DiversityReport, MetricsReport, OodMetrics, OodScoreKind, OodScoreSet, ProbBatch,
};
use crate::model::{build_model, Granularity, ModelSpec};
use crate::trainer::{train_dca, train_deep_ensemble, train_standard, LossKind, TrainConfig, TrainLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A method cell in the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Standard,
    DeepEnsemble { n: usize },
    Dca { granularity: Granularity, loss: LossKind, n: usize },
    Dcwa { granularity: Granularity, loss: LossKind, n: usize },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Standard => "standard".into(),
            Method::DeepEnsemble { n } => format!("deep_ensemble(n={})", n),
            Method::Dca { granularity, loss, n } => {
                format!("dca({},{},n={})", granularity.as_str(), loss.as_str(), n)
            }
            Method::Dcwa { granularity, loss, n } => {
                format!("dcwa({},{},n={})", granularity.as_str(), loss.as_str(), n)
            }
        }
    }

    /// Flat serializable description used in CSV/JSON outputs.
    pub fn desc(&self) -> MethodDesc {
        match self {
            Method::Standard => MethodDesc {
                method: "standard".into(),
                granularity: None,
                loss: None,
                n: None,
            },
            Method::DeepEnsemble { n } => MethodDesc {
                method: "deep_ensemble".into(),
                granularity: None,
                loss: None,
                n: Some(*n),
            },
            Method::Dca { granularity, loss, n } => MethodDesc {
                method: "dca".into(),
                granularity: Some(granularity.as_str().into()),
                loss: Some(loss.as_str().into()),
                n: Some(*n),
            },
            Method::Dcwa { granularity, loss, n } => MethodDesc {
                method: "dcwa".into(),
                granularity: Some(granularity.as_str().into()),
                loss: Some(loss.as_str().into()),
                n: Some(*n),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDesc {
    pub method: String,
    pub granularity: Option<String>,
    pub loss: Option<String>,
    pub n: Option<usize>,
}

impl MethodDesc {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{}",
            self.method,
            self.granularity.as_deref().unwrap_or(""),
            self.loss.as_deref().unwrap_or(""),
            self.n.map(|n| n.to_string()).unwrap_or_default()
        )
    }
}

/// Prediction aggregation space across proposals/members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Probs,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Proposals sampled at inference for sub-model granularities; modelwise
    /// banks always enumerate their n members instead.
    pub proposals: usize,
    pub ece_bins: usize,
    pub score: OodScoreKind,
    pub aggregate: AggregationKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            proposals: 30,
            ece_bins: 15,
            score: OodScoreKind::MaxProb,
            aggregate: AggregationKind::Probs,
        }
    }
}

/// A trained model in any of the method families.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Single(Vec<f64>),
    Ensemble(Vec<Vec<f64>>),
    Bank(DcaParameterBank),
    Averaged { params: Vec<f64>, bank: DcaParameterBank, coarse_grain_warning: bool },
}

#[derive(Debug, Clone)]
pub struct TrainedMethod {
    pub method: Method,
    pub seed: u64,
    pub model: TrainedModel,
    pub logs: Vec<TrainLog>,
}

impl TrainedMethod {
    pub fn coarse_grain_warning(&self) -> bool {
        matches!(&self.model, TrainedModel::Averaged { coarse_grain_warning: true, .. })
    }
}

/// Train one method cell at one seed.
pub fn train_method(
    spec: &ModelSpec,
    method: &Method,
    train: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedMethod> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.seed = seed;
    let (model, logs) = match method {
        Method::Standard => {
            cell_cfg.loss = LossKind::Nll;
            let (params, log) = train_standard(spec, train, &cell_cfg)?;
            (TrainedModel::Single(params), vec![log])
        }
        Method::DeepEnsemble { n } => {
            cell_cfg.loss = LossKind::Nll;
            let members = train_deep_ensemble(spec, train, &cell_cfg, *n)?;
            let (params, logs): (Vec<_>, Vec<_>) = members.into_iter().unzip();
            (TrainedModel::Ensemble(params), logs)
        }
        Method::Dca { granularity, loss, n } => {
            cell_cfg.loss = *loss;
            let mut bank = DcaParameterBank::init(spec, *granularity, *n, seed)?;
            let log = train_dca(&mut bank, train, &cell_cfg)?;
            (TrainedModel::Bank(bank), vec![log])
        }
        Method::Dcwa { granularity, loss, n } => {
            cell_cfg.loss = *loss;
            let mut bank = DcaParameterBank::init(spec, *granularity, *n, seed)?;
            let log = train_dca(&mut bank, train, &cell_cfg)?;
            let avg = average_weights(&bank);
            (
                TrainedModel::Averaged {
                    params: avg.params,
                    bank,
                    coarse_grain_warning: avg.coarse_grain_warning,
                },
                vec![log],
            )
        }
    };
    Ok(TrainedMethod { method: method.clone(), seed, model, logs })
}

/// Forward one parameter vector over a dataset, labels attached.
pub fn predict_single(spec: &ModelSpec, params: &[f64], data: &Dataset) -> Result<ProbBatch> {
    let (mut graph, _) = build_model(spec)?;
    let log_probs = graph.forward(params, &data.input_tensor())?;
    ProbBatch::from_log_probs(&log_probs, Some(data.labels.clone()))
}

fn log_prob_tensors(
    spec: &ModelSpec,
    param_sets: impl Iterator<Item = Vec<f64>>,
    data: &Dataset,
) -> Result<Vec<crate::tensor::Tensor>> {
    let (mut graph, _) = build_model(spec)?;
    let inputs = data.input_tensor();
    let mut out = Vec::new();
    for params in param_sets {
        out.push(graph.forward(&params, &inputs)?);
    }
    Ok(out)
}

/// Aggregated prediction of a trained model on a dataset. Banks sample (or,
/// for modelwise, enumerate) their inference proposals from a fresh RNG
/// seeded by `eval_seed`, so identical calls agree bit for bit.
pub fn predict(
    spec: &ModelSpec,
    model: &TrainedModel,
    data: &Dataset,
    eval_cfg: &EvalConfig,
    eval_seed: u64,
) -> Result<ProbBatch> {
    let log_probs = match model {
        TrainedModel::Single(params) => {
            return predict_single(spec, params, data);
        }
        TrainedModel::Averaged { params, .. } => {
            return predict_single(spec, params, data);
        }
        TrainedModel::Ensemble(members) => {
            log_prob_tensors(spec, members.iter().cloned(), data)?
        }
        TrainedModel::Bank(bank) => {
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
            rng.set_stream(2);
            let proposals = bank.inference_proposals(eval_cfg.proposals, &mut rng);
            let params: Result<Vec<Vec<f64>>> =
                proposals.iter().map(|p| bank.assemble(p)).collect();
            log_prob_tensors(spec, params?.into_iter(), data)?
        }
    };
    match eval_cfg.aggregate {
        AggregationKind::Probs => {
            let batches: Result<Vec<ProbBatch>> = log_probs
                .iter()
                .map(|lp| ProbBatch::from_log_probs(lp, Some(data.labels.clone())))
                .collect();
            aggregate_predictions(&batches?)
        }
        // log-probs differ from logits by a per-row constant, which softmax
        // ignores, so averaging them equals logit averaging
        AggregationKind::Logits => aggregate_logits(&log_probs, Some(data.labels.clone())),
    }
}

/// Per-member predictions (deep ensembles and modelwise banks).
pub fn member_predictions(
    spec: &ModelSpec,
    model: &TrainedModel,
    data: &Dataset,
) -> Result<Vec<ProbBatch>> {
    let param_sets: Vec<Vec<f64>> = match model {
        TrainedModel::Ensemble(members) => members.clone(),
        TrainedModel::Bank(bank) => {
            if bank.granularity() != Granularity::Modelwise {
                return Err(DcaError::Config(
                    "member analysis needs a modelwise bank".into(),
                ));
            }
            (0..bank.n)
                .map(|i| {
                    bank.assemble(&crate::bank::Proposal {
                        indices: vec![i; bank.component_count()],
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => return Err(DcaError::Config("model has no members to analyze".into())),
    };
    param_sets.iter().map(|p| predict_single(spec, p, data)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    #[serde(flatten)]
    pub method: MethodDesc,
    pub seed: u64,
    pub coarse_grain_warning: bool,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellError {
    #[serde(flatten)]
    pub method: MethodDesc,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (Bessel). One value reports std 0.
fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    #[serde(flatten)]
    pub method: MethodDesc,
    pub stats: BTreeMap<String, MeanStd>,
    /// True when only one seed contributed, making the std degenerate.
    pub degenerate_std: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InDomainResult {
    pub rows: Vec<RunRow>,
    pub errors: Vec<CellError>,
    pub summary: Vec<MethodSummary>,
}

fn flatten_report(r: &MetricsReport) -> Vec<(String, f64)> {
    let mut out = vec![
        ("accuracy".to_string(), r.accuracy),
        ("nll".to_string(), r.nll),
        ("ece".to_string(), r.ece),
        ("brier".to_string(), r.brier),
    ];
    if let Some(o) = &r.ood {
        out.push(("fpr_at_95_tpr".to_string(), o.fpr_at_95_tpr));
        out.push(("detection_error".to_string(), o.detection_error));
        out.push(("auroc".to_string(), o.auroc));
        out.push(("aupr_in".to_string(), o.aupr_in));
        out.push(("aupr_out".to_string(), o.aupr_out));
    }
    out
}

fn summarize(rows: &[RunRow]) -> Vec<MethodSummary> {
    let mut order: Vec<MethodDesc> = Vec::new();
    for row in rows {
        if !order.contains(&row.method) {
            order.push(row.method.clone());
        }
    }
    order
        .into_iter()
        .map(|desc| {
            let cells: Vec<&RunRow> = rows.iter().filter(|r| r.method == desc).collect();
            let mut stats = BTreeMap::new();
            if let Some(first) = cells.first() {
                for (name, _) in flatten_report(&first.report) {
                    let values: Vec<f64> = cells
                        .iter()
                        .flat_map(|c| {
                            flatten_report(&c.report)
                                .into_iter()
                                .filter(|(k, _)| *k == name)
                                .map(|(_, v)| v)
                        })
                        .collect();
                    stats.insert(name, mean_std(&values));
                }
            }
            MethodSummary { method: desc, stats, degenerate_std: cells.len() < 2 }
        })
        .collect()
}

/// Train every (method, seed) cell. Failed cells land in the error list and
/// leave the rest intact.
pub fn train_methods(
    spec: &ModelSpec,
    methods: &[Method],
    train: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> (Vec<TrainedMethod>, Vec<CellError>) {
    let mut trained = Vec::new();
    let mut errors = Vec::new();
    for method in methods {
        for &seed in seeds {
            match train_method(spec, method, train, cfg, seed) {
                Ok(t) => trained.push(t),
                Err(e) => errors.push(CellError {
                    method: method.desc(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    (trained, errors)
}

/// Evaluate trained cells on the in-domain test split.
pub fn evaluate_indomain(
    spec: &ModelSpec,
    trained: &[TrainedMethod],
    test: &Dataset,
    eval_cfg: &EvalConfig,
) -> InDomainResult {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for t in trained {
        let outcome = predict(spec, &t.model, test, eval_cfg, t.seed)
            .and_then(|batch| report(&batch, eval_cfg.ece_bins));
        match outcome {
            Ok(rep) => rows.push(RunRow {
                method: t.method.desc(),
                seed: t.seed,
                coarse_grain_warning: t.coarse_grain_warning(),
                report: rep,
            }),
            Err(e) => errors.push(CellError {
                method: t.method.desc(),
                seed: t.seed,
                error: e.to_string(),
            }),
        }
    }
    let summary = summarize(&rows);
    InDomainResult { rows, errors, summary }
}

/// One full in-domain experiment: train all cells, evaluate on the test set.
pub fn run_indomain(
    spec: &ModelSpec,
    methods: &[Method],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
) -> (Vec<TrainedMethod>, InDomainResult) {
    let (trained, train_errors) = train_methods(spec, methods, train, cfg, seeds);
    let mut result = evaluate_indomain(spec, &trained, test, eval_cfg);
    result.errors.extend(train_errors);
    (trained, result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftRow {
    #[serde(flatten)]
    pub method: MethodDesc,
    pub seed: u64,
    pub kind: String,
    pub severity: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftResult {
    pub rows: Vec<ShiftRow>,
    pub errors: Vec<CellError>,
}

impl ShiftResult {
    /// Long-form CSV: method, granularity, loss, n, seed, kind, severity,
    /// metric, value.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,granularity,loss,n,seed,kind,severity,metric,value\n");
        for row in &self.rows {
            for (metric, value) in flatten_report(&row.report) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.method.csv_fields(),
                    row.seed,
                    row.kind,
                    row.severity,
                    metric,
                    value
                ));
            }
        }
        out
    }
}

/// Evaluate trained models on corrupted test sets, one row per
/// (cell, kind, severity). Severity 0 is the uncorrupted test set and
/// reproduces the in-domain row exactly.
pub fn run_shift(
    spec: &ModelSpec,
    trained: &[TrainedMethod],
    test: &Dataset,
    kinds: &[CorruptionKind],
    severities: &[usize],
    eval_cfg: &EvalConfig,
    corruption_seed: u64,
) -> ShiftResult {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        for &severity in severities {
            let cspec = CorruptionSpec { kind, severity };
            let corrupted = match corrupt(test, &cspec, corruption_seed + (ki * 10 + severity) as u64) {
                Ok(d) => d,
                Err(e) => {
                    errors.push(CellError {
                        method: MethodDesc {
                            method: "corruption".into(),
                            granularity: None,
                            loss: None,
                            n: None,
                        },
                        seed: corruption_seed,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            for t in trained {
                let outcome = predict(spec, &t.model, &corrupted, eval_cfg, t.seed)
                    .and_then(|b| report(&b, eval_cfg.ece_bins));
                match outcome {
                    Ok(rep) => rows.push(ShiftRow {
                        method: t.method.desc(),
                        seed: t.seed,
                        kind: kind.as_str().into(),
                        severity,
                        report: rep,
                    }),
                    Err(e) => errors.push(CellError {
                        method: t.method.desc(),
                        seed: t.seed,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    ShiftResult { rows, errors }
}

#[derive(Debug, Clone, Serialize)]
pub struct OodRow {
    #[serde(flatten)]
    pub method: MethodDesc,
    pub seed: u64,
    pub metrics: OodMetrics,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OodResult {
    pub rows: Vec<OodRow>,
    pub errors: Vec<CellError>,
}

impl OodResult {
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("method,granularity,loss,n,seed,fpr,tpr\n");
        for row in &self.rows {
            for (fpr, tpr) in &row.roc {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.method.csv_fields(),
                    row.seed,
                    fpr,
                    tpr
                ));
            }
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "method,granularity,loss,n,seed,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.method.csv_fields(),
                row.seed,
                row.metrics.fpr_at_95_tpr,
                row.metrics.detection_error,
                row.metrics.auroc,
                row.metrics.aupr_in,
                row.metrics.aupr_out
            ));
        }
        out
    }
}

/// OOD detection: score both test sets with each trained model, emit the
/// five metrics and the full ROC polyline.
pub fn run_ood(
    spec: &ModelSpec,
    trained: &[TrainedMethod],
    in_test: &Dataset,
    out_test: &Dataset,
    eval_cfg: &EvalConfig,
) -> OodResult {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for t in trained {
        let outcome = (|| -> Result<OodRow> {
            let in_batch = predict(spec, &t.model, in_test, eval_cfg, t.seed)?;
            let out_batch = predict(spec, &t.model, out_test, eval_cfg, t.seed)?;
            let scores = OodScoreSet::from_batches(&in_batch, &out_batch, eval_cfg.score)?;
            Ok(OodRow {
                method: t.method.desc(),
                seed: t.seed,
                metrics: ood_metrics(&scores),
                roc: roc_points(&scores),
            })
        })();
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(CellError {
                method: t.method.desc(),
                seed: t.seed,
                error: e.to_string(),
            }),
        }
    }
    OodResult { rows, errors }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Granularity,
    Loss,
    InstanceCount,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "granularity" => Ok(AblationAxis::Granularity),
            "loss" => Ok(AblationAxis::Loss),
            "instance_count" => Ok(AblationAxis::InstanceCount),
            other => Err(DcaError::Config(format!("unknown ablation axis '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub rows: Vec<RunRow>,
    pub errors: Vec<CellError>,
    pub summary: Vec<MethodSummary>,
}

impl AblationResult {
    /// Long-form CSV: method, granularity, loss, n, seed, metric, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,granularity,loss,n,seed,metric,value\n");
        for row in &self.rows {
            for (metric, value) in flatten_report(&row.report) {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.method.csv_fields(),
                    row.seed,
                    metric,
                    value
                ));
            }
        }
        out
    }
}

/// Sweep one axis, holding the others at their defaults (n = 5, CEL loss,
/// layerwise for fine-grain sweeps). DCA and DCWA rows of the same
/// configuration share one trained bank.
pub fn run_ablations(
    spec: &ModelSpec,
    axis: AblationAxis,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
    default_n: usize,
) -> AblationResult {
    let mut rows = Vec::new();
    let mut errors = Vec::new();

    // (granularity, loss, n) bank configurations to train; each yields a DCA
    // row and, where requested, a DCWA row from the same bank.
    let (configs, with_dcwa): (Vec<(Granularity, LossKind, usize)>, bool) = match axis {
        AblationAxis::Granularity => (
            Granularity::ALL.iter().map(|&g| (g, LossKind::Cel, default_n)).collect(),
            true,
        ),
        AblationAxis::Loss => (
            vec![
                (Granularity::Layerwise, LossKind::Nll, default_n),
                (Granularity::Layerwise, LossKind::Cel, default_n),
                (Granularity::Trunkwise, LossKind::Nll, default_n),
                (Granularity::Trunkwise, LossKind::Cel, default_n),
                (Granularity::Modelwise, LossKind::Nll, default_n),
                (Granularity::Modelwise, LossKind::Cel, default_n),
            ],
            false,
        ),
        AblationAxis::InstanceCount => (
            (2..=5).map(|n| (Granularity::Layerwise, LossKind::Cel, n)).collect(),
            true,
        ),
    };

    for (granularity, loss, n) in configs {
        // the loss sweep pairs DCWA with layerwise banks only
        let emit_dcwa = with_dcwa || granularity == Granularity::Layerwise;
        for &seed in seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.seed = seed;
            cell_cfg.loss = loss;
            let outcome = (|| -> Result<(RunRow, Option<RunRow>)> {
                let mut bank = DcaParameterBank::init(spec, granularity, n, seed)?;
                train_dca(&mut bank, train, &cell_cfg)?;
                let avg = average_weights(&bank);
                let model = TrainedModel::Bank(bank);
                let dca_batch = predict(spec, &model, test, eval_cfg, seed)?;
                let dca_row = RunRow {
                    method: Method::Dca { granularity, loss, n }.desc(),
                    seed,
                    coarse_grain_warning: false,
                    report: report(&dca_batch, eval_cfg.ece_bins)?,
                };
                let dcwa_row = if emit_dcwa {
                    let batch = {
                        let bank_ref = match &model {
                            TrainedModel::Bank(b) => b,
                            _ => unreachable!(),
                        };
                        let avg_model = TrainedModel::Averaged {
                            params: avg.params.clone(),
                            bank: bank_ref.clone(),
                            coarse_grain_warning: avg.coarse_grain_warning,
                        };
                        predict(spec, &avg_model, test, eval_cfg, seed)?
                    };
                    Some(RunRow {
                        method: Method::Dcwa { granularity, loss, n }.desc(),
                        seed,
                        coarse_grain_warning: avg.coarse_grain_warning,
                        report: report(&batch, eval_cfg.ece_bins)?,
                    })
                } else {
                    None
                };
                Ok((dca_row, dcwa_row))
            })();
            match outcome {
                Ok((dca_row, dcwa_row)) => {
                    rows.push(dca_row);
                    if let Some(r) = dcwa_row {
                        rows.push(r);
                    }
                }
                Err(e) => errors.push(CellError {
                    method: Method::Dca { granularity, loss, n }.desc(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }

    // stable axis ordering for the summary regardless of cell completion
    rows.sort_by(|a, b| {
        (&a.method.method, &a.method.granularity, &a.method.loss, a.method.n, a.seed).cmp(&(
            &b.method.method,
            &b.method.granularity,
            &b.method.loss,
            b.method.n,
            b.seed,
        ))
    });
    let summary = summarize(&rows);
    AblationResult { axis, rows, errors, summary }
}

#[derive(Debug, Clone, Serialize)]
pub struct IndividualArm {
    pub loss: String,
    pub per_member: Vec<MetricsReport>,
    pub diversity: DiversityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndividualAnalysis {
    pub seed: u64,
    pub nll: IndividualArm,
    pub cel: IndividualArm,
}

fn individual_arm(
    spec: &ModelSpec,
    bank: &DcaParameterBank,
    test: &Dataset,
    eval_cfg: &EvalConfig,
    loss: LossKind,
) -> Result<IndividualArm> {
    if bank.granularity() != Granularity::Modelwise {
        return Err(DcaError::Config(format!(
            "individual analysis needs a modelwise bank, got {}",
            bank.granularity().as_str()
        )));
    }
    let model = TrainedModel::Bank(bank.clone());
    let members = member_predictions(spec, &model, test)?;
    let per_member: Result<Vec<MetricsReport>> =
        members.iter().map(|b| report(b, eval_cfg.ece_bins)).collect();
    Ok(IndividualArm {
        loss: loss.as_str().into(),
        per_member: per_member?,
        diversity: diversity(&members)?,
    })
}

/// Appendix-style member analysis: train modelwise banks with NLL and CEL,
/// evaluate every member alone, and measure cross-member diversity.
pub fn run_individual_analysis(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    n: usize,
    seed: u64,
) -> Result<IndividualAnalysis> {
    let mut arms = Vec::new();
    for loss in [LossKind::Nll, LossKind::Cel] {
        let mut cell_cfg = cfg.clone();
        cell_cfg.seed = seed;
        cell_cfg.loss = loss;
        let mut bank = DcaParameterBank::init(spec, Granularity::Modelwise, n, seed)?;
        train_dca(&mut bank, train, &cell_cfg)?;
        arms.push(individual_arm(spec, &bank, test, eval_cfg, loss)?);
    }
    let cel = arms.pop().unwrap();
    let nll = arms.pop().unwrap();
    Ok(IndividualAnalysis { seed, nll, cel })
}

/// Member analysis over already-trained modelwise banks.
pub fn analyze_members(
    spec: &ModelSpec,
    nll_bank: &DcaParameterBank,
    cel_bank: &DcaParameterBank,
    test: &Dataset,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<IndividualAnalysis> {
    Ok(IndividualAnalysis {
        seed,
        nll: individual_arm(spec, nll_bank, test, eval_cfg, LossKind::Nll)?,
        cel: individual_arm(spec, cel_bank, test, eval_cfg, LossKind::Cel)?,
    })
}

impl InDomainResult {
    /// Long-form CSV: method, granularity, loss, n, seed, metric, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,granularity,loss,n,seed,metric,value\n");
        for row in &self.rows {
            for (metric, value) in flatten_report(&row.report) {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.method.csv_fields(),
                    row.seed,
                    metric,
                    value
                ));
            }
        }
        out
    }
}
