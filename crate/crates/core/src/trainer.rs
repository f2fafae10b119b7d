//! Joint DCA training (one proposal per gradient pass, selective updates),
//! the chained-reference consistency scheme, and the standard / deep
//! ensemble baselines. All runs are deterministic given their seed.

use crate::bank::{DcaParameterBank, InstanceBuffers, Proposal};
use crate::data::Dataset;
use crate::error::{DcaError, Result};
use crate::losses::{cel, nll, LossOutput, ReferenceDistribution};
use crate::model::{build_model, ModelSpec};
use crate::tensor::{ComputeGraph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Cel,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Cel => "cel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(LossKind::Nll),
            "cel" => Ok(LossKind::Cel),
            other => Err(DcaError::Config(format!("unknown loss '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply lr by `factor` once the epoch passes each milestone, given
    /// as fractions of the total epoch count.
    StepDecay { milestones: Vec<f64>, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay { milestones: vec![0.5, 0.75], factor: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Gradient passes per minibatch (s). Defaults to the bank's n.
    pub inner_passes: Option<usize>,
    pub kl_weight: f64,
    pub lr_schedule: LrSchedule,
    /// Average the s accumulated gradients (true) or sum them (false).
    pub average_gradients: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            loss: LossKind::Nll,
            inner_passes: None,
            kl_weight: 1.0,
            lr_schedule: LrSchedule::default(),
            average_gradients: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_epochs == 0 {
            return Err(DcaError::Config("base_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DcaError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(DcaError::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DcaError::Config("momentum must be in [0, 1)".into()));
        }
        if self.inner_passes == Some(0) {
            return Err(DcaError::Config("inner_passes must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn lr_at(cfg: &TrainConfig, epoch: usize, total_epochs: usize) -> f64 {
    match &cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::StepDecay { milestones, factor } => {
            let mut lr = cfg.lr;
            for &m in milestones {
                if epoch as f64 >= m * total_epochs as f64 {
                    lr *= factor;
                }
            }
            lr
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Total graph forward passes executed over the run.
    pub forward_passes: u64,
    /// Filled in by callers that persist the result.
    pub checkpoint: Option<String>,
}

impl TrainLog {
    /// CSV rendering: epoch, loss, accuracy, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.accuracy, e.seconds));
        }
        out
    }
}

/// What one DCA optimization step did.
#[derive(Debug, Clone)]
pub struct StepInfo {
    /// Every proposal sampled during the step, reference pass included.
    pub proposals: Vec<Proposal>,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub forward_passes: u64,
    pub clamped: usize,
}

fn gather(data: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let mut inputs = Vec::with_capacity(idx.len() * data.dim);
    let mut labels = Vec::with_capacity(idx.len());
    for &r in idx {
        inputs.extend_from_slice(data.row(r));
        labels.push(data.labels[r]);
    }
    (
        Tensor { shape: vec![idx.len(), data.dim], data: inputs, grad: None },
        labels,
    )
}

fn batch_accuracy(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let c = log_probs.cols();
    let mut hits = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = log_probs.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    let _ = c;
    hits as f64 / labels.len() as f64
}

/// Drives joint DCA training step by step. Owns the gradient accumulator and
/// the per-instance-slot momentum buffers; the bank is borrowed mutably for
/// the trainer's lifetime.
pub struct DcaTrainer<'a> {
    bank: &'a mut DcaParameterBank,
    graph: ComputeGraph,
    cfg: TrainConfig,
    accum: InstanceBuffers,
    momentum: InstanceBuffers,
    rng: ChaCha8Rng,
    inner_passes: usize,
}

impl<'a> DcaTrainer<'a> {
    pub fn new(bank: &'a mut DcaParameterBank, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (graph, _) = build_model(&bank.spec)?;
        let accum = InstanceBuffers::zeros_like(bank);
        let momentum = InstanceBuffers::zeros_like(bank);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let inner_passes = cfg.inner_passes.unwrap_or(bank.n);
        Ok(DcaTrainer { bank, graph, cfg, accum, momentum, rng, inner_passes })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn momentum_buffers(&self) -> &InstanceBuffers {
        &self.momentum
    }

    pub fn bank(&self) -> &DcaParameterBank {
        self.bank
    }

    pub fn inner_passes(&self) -> usize {
        self.inner_passes
    }

    /// One optimization step on a minibatch with externally chosen proposals
    /// (tests force specific selections through this).
    pub fn step_with_proposals(
        &mut self,
        inputs: &Tensor,
        labels: &[usize],
        lr: f64,
        proposals: &[Proposal],
    ) -> Result<StepInfo> {
        let s = self.inner_passes;
        let needs_reference = self.cfg.loss == LossKind::Cel;
        let expected = if needs_reference { s + 1 } else { s };
        if proposals.len() != expected {
            return Err(DcaError::Proposal(format!(
                "step wants {} proposals, got {}",
                expected,
                proposals.len()
            )));
        }

        let mut reference: Option<ReferenceDistribution> = None;
        let mut grad_proposals = proposals;
        let mut forward_passes = 0u64;
        if needs_reference {
            let params = self.bank.assemble(&proposals[0])?;
            let log_probs = self.graph.forward(&params, inputs)?;
            forward_passes += 1;
            reference = Some(ReferenceDistribution::from_log_probs(&log_probs)?);
            grad_proposals = &proposals[1..];
        }

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut clamped = 0;
        for proposal in grad_proposals {
            let params = self.bank.assemble(proposal)?;
            let log_probs = self.graph.forward(&params, inputs)?;
            forward_passes += 1;
            let out: LossOutput = match self.cfg.loss {
                LossKind::Nll => nll(&log_probs, labels)?,
                LossKind::Cel => {
                    let r = reference.as_ref().unwrap();
                    cel(&log_probs, labels, r, self.cfg.kl_weight)?
                }
            };
            if !out.value.is_finite() {
                self.accum.fill_zero();
                return Err(DcaError::Numeric(format!(
                    "non-finite training loss {}; bank left at last good state",
                    out.value
                )));
            }
            let grads = self.graph.backward(&out.grad_log_probs)?;
            self.bank.scatter_gradients(proposal, &grads, &mut self.accum)?;
            if needs_reference {
                reference = Some(ReferenceDistribution::from_log_probs(&log_probs)?);
            }
            loss_sum += out.value;
            acc_sum += batch_accuracy(&log_probs, labels);
            clamped += out.clamped;
        }

        // momentum update on exactly the instances a gradient pass selected
        let scale = if self.cfg.average_gradients { 1.0 / s as f64 } else { 1.0 };
        let mu = self.cfg.momentum;
        let mut touched: Vec<Vec<bool>> =
            self.bank.instances.iter().map(|c| vec![false; c.len()]).collect();
        for proposal in grad_proposals {
            for (c, &i) in proposal.indices.iter().enumerate() {
                touched[c][i] = true;
            }
        }
        for c in 0..touched.len() {
            for i in 0..touched[c].len() {
                if !touched[c][i] {
                    continue;
                }
                let weights = &mut self.bank.instances[c][i];
                let vel = &mut self.momentum.comps[c][i];
                let acc = &mut self.accum.comps[c][i];
                for k in 0..weights.len() {
                    vel[k] = mu * vel[k] + scale * acc[k];
                    weights[k] -= lr * vel[k];
                    acc[k] = 0.0;
                }
            }
        }

        Ok(StepInfo {
            proposals: proposals.to_vec(),
            mean_loss: loss_sum / s as f64,
            mean_accuracy: acc_sum / s as f64,
            forward_passes,
            clamped,
        })
    }

    /// One optimization step with freshly sampled proposals.
    pub fn step(&mut self, inputs: &Tensor, labels: &[usize], lr: f64) -> Result<StepInfo> {
        let count =
            if self.cfg.loss == LossKind::Cel { self.inner_passes + 1 } else { self.inner_passes };
        let proposals: Vec<Proposal> =
            (0..count).map(|_| self.bank.sample_proposal(&mut self.rng)).collect();
        self.step_with_proposals(inputs, labels, lr, &proposals)
    }
}

/// Joint DCA training (the bank's granularity decides the components).
/// Runs `base_epochs * n` epochs; each minibatch takes s gradient passes on
/// fresh proposals (plus one reference pass in CEL mode).
pub fn train_dca(
    bank: &mut DcaParameterBank,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if data.classes != bank.spec.class_count {
        return Err(DcaError::Config(format!(
            "bank expects {} classes, dataset has {}",
            bank.spec.class_count, data.classes
        )));
    }
    let total_epochs = cfg.base_epochs * bank.n;
    let mut trainer = DcaTrainer::new(bank, cfg.clone())?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.n).collect();
    for epoch in 0..total_epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch, total_epochs);
        order.shuffle(&mut trainer.rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, labels) = gather(data, chunk);
            let info = trainer.step(&inputs, &labels, lr)?;
            loss_sum += info.mean_loss;
            acc_sum += info.mean_accuracy;
            batches += 1.0;
            log.forward_passes += info.forward_passes;
        }
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / batches,
            accuracy: acc_sum / batches,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Standard single-model training: NLL loss, one parameter set, base_epochs
/// epochs. Initialization matches a bank's first instance at the same seed.
pub fn train_standard(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainLog)> {
    cfg.validate()?;
    if data.classes != spec.class_count {
        return Err(DcaError::Config(format!(
            "model expects {} classes, dataset has {}",
            spec.class_count, data.classes
        )));
    }
    let (mut graph, _) = build_model(spec)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut params = crate::bank::init_flat_params(spec, &mut init_rng)?;
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.n).collect();
    for epoch in 0..cfg.base_epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch, cfg.base_epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, labels) = gather(data, chunk);
            let log_probs = graph.forward(&params, &inputs)?;
            log.forward_passes += 1;
            let out = nll(&log_probs, &labels)?;
            if !out.value.is_finite() {
                return Err(DcaError::Numeric(format!(
                    "non-finite training loss {}; parameters left at last good state",
                    out.value
                )));
            }
            let grads = graph.backward(&out.grad_log_probs)?;
            for k in 0..params.len() {
                velocity[k] = cfg.momentum * velocity[k] + grads[k];
                params[k] -= lr * velocity[k];
            }
            loss_sum += out.value;
            acc_sum += batch_accuracy(&log_probs, &labels);
            batches += 1.0;
        }
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / batches,
            accuracy: acc_sum / batches,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}

/// Deep ensemble baseline: n fully independent standard runs with seeds
/// seed, seed+1, ..., seed+n-1.
pub fn train_deep_ensemble(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    n: usize,
) -> Result<Vec<(Vec<f64>, TrainLog)>> {
    if n == 0 {
        return Err(DcaError::Config("deep ensemble needs n >= 1 members".into()));
    }
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let mut member_cfg = cfg.clone();
        member_cfg.seed = cfg.seed + i as u64;
        members.push(train_standard(spec, data, &member_cfg)?);
    }
    Ok(members)
}
