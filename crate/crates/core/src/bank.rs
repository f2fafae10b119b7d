//! DCA parameter bank: n instances per aggregation component, proposal
//! sampling, parameter assembly, and selective gradient scatter.

use crate::error::{DcaError, Result};
use crate::model::{partition, Granularity, ModelSpec, Partition};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One concrete model choice: an instance index per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub indices: Vec<usize>,
}

/// n^components, or an overflow marker when it exceeds 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalCount {
    Exact(u64),
    Overflow,
}

/// Per-component, per-instance buffers shaped like the bank's instances.
/// Used for gradient accumulators and momentum state.
#[derive(Debug, Clone)]
pub struct InstanceBuffers {
    pub comps: Vec<Vec<Vec<f64>>>,
}

impl InstanceBuffers {
    pub fn zeros_like(bank: &DcaParameterBank) -> Self {
        let comps = bank
            .instances
            .iter()
            .map(|inst| inst.iter().map(|a| vec![0.0; a.len()]).collect())
            .collect();
        InstanceBuffers { comps }
    }

    pub fn fill_zero(&mut self) {
        for comp in &mut self.comps {
            for arr in comp {
                arr.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// n independently initialized parameter instances for every component of a
/// partitioned model.
#[derive(Debug, Clone)]
pub struct DcaParameterBank {
    pub spec: ModelSpec,
    pub partition: Partition,
    pub n: usize,
    /// `instances[c][i]` holds instance i of component c, one f64 per slot
    /// the component owns, in slot order.
    pub instances: Vec<Vec<Vec<f64>>>,
    pub rng_seed: u64,
}

/// Damping applied to the Kaiming bound of each residual block's closing
/// dense layer. Without normalization layers, identity skips stack the
/// branch variances, so full-scale branches give the untrained network
/// logits large enough to saturate softmax and destabilize SGD. Starting
/// the branches near zero keeps the residual stream variance-preserving at
/// any depth while still drawing distinct per-instance weights.
pub const RESIDUAL_BRANCH_INIT_SCALE: f64 = 0.01;

/// Damping applied to trunk-entry layers. Layers that start at full Kaiming
/// scale never reconcile their independently drawn bases under joint DCA
/// training, which wrecks weight averaging; layers that grow from a small
/// scale co-adapt into compatible ones. A mild factor keeps the entry
/// trainable while letting its learned part dominate the initial noise.
pub const TRUNK_ENTRY_INIT_SCALE: f64 = 0.1;

/// Kaiming-uniform fan-in initialization of one full flat parameter vector:
/// weights uniform in +-sqrt(6/fan_in) (damped on branch-closing layers,
/// see above), biases zero. Slot order follows the interleaved neuron-major
/// layout, so each dense layer samples its rows in sequence.
pub fn init_flat_params(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let (_, layout) = crate::model::build_model(spec)?;
    let mut params = vec![0.0; layout.total_slots];
    for layer in &layout.layers {
        let mut bound = (6.0 / layer.in_dim as f64).sqrt();
        match layer.role {
            crate::model::LayerRole::BlockLayer { half: 1, .. } => {
                bound *= RESIDUAL_BRANCH_INIT_SCALE;
            }
            crate::model::LayerRole::TrunkEntry { .. } => {
                bound *= TRUNK_ENTRY_INIT_SCALE;
            }
            _ => {}
        }
        let stride = layer.in_dim + 1;
        for j in 0..layer.out_dim {
            let base = layer.offset + j * stride;
            for i in 0..layer.in_dim {
                params[base + i] = rng.gen_range(-bound..bound);
            }
            params[base + layer.in_dim] = 0.0;
        }
    }
    Ok(params)
}

impl DcaParameterBank {
    /// Create a bank with n >= 2 independently initialized instances per
    /// component. Instance i draws from stream i of a ChaCha generator keyed
    /// by `seed`, so banks are reproducible and instances are independent.
    pub fn init(spec: &ModelSpec, g: Granularity, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(DcaError::Config(format!(
                "DCA needs n >= 2 component instances, got n = {}",
                n
            )));
        }
        let part = partition(spec, g)?;
        let mut instances: Vec<Vec<Vec<f64>>> =
            part.components.iter().map(|_| Vec::with_capacity(n)).collect();
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let flat = init_flat_params(spec, &mut rng)?;
            for (c, comp) in part.components.iter().enumerate() {
                let mut arr = Vec::with_capacity(comp.slot_count());
                for r in &comp.ranges {
                    arr.extend_from_slice(&flat[r.start..r.end]);
                }
                instances[c].push(arr);
            }
        }
        Ok(DcaParameterBank { spec: spec.clone(), partition: part, n, instances, rng_seed: seed })
    }

    /// Build a bank directly from per-component instance arrays (checkpoint
    /// loading, tests). Validates shape against the partition.
    pub fn from_instances(
        spec: &ModelSpec,
        g: Granularity,
        instances: Vec<Vec<Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        let part = partition(spec, g)?;
        if instances.len() != part.components.len() {
            return Err(DcaError::Dimension(format!(
                "{} component arrays for a {}-component partition",
                instances.len(),
                part.components.len()
            )));
        }
        let n = instances.first().map(|c| c.len()).unwrap_or(0);
        if n == 0 {
            return Err(DcaError::Dimension("bank needs at least one instance".into()));
        }
        for (c, (arrs, comp)) in instances.iter().zip(&part.components).enumerate() {
            if arrs.len() != n {
                return Err(DcaError::Dimension(format!(
                    "component {} has {} instances, expected {}",
                    c,
                    arrs.len(),
                    n
                )));
            }
            for a in arrs {
                if a.len() != comp.slot_count() {
                    return Err(DcaError::Dimension(format!(
                        "component {} instance length {} != slot count {}",
                        c,
                        a.len(),
                        comp.slot_count()
                    )));
                }
            }
        }
        Ok(DcaParameterBank { spec: spec.clone(), partition: part, n, instances, rng_seed: seed })
    }

    pub fn component_count(&self) -> usize {
        self.partition.component_count()
    }

    pub fn total_slots(&self) -> usize {
        self.partition.total_slots
    }

    pub fn granularity(&self) -> Granularity {
        self.partition.granularity
    }

    /// Draw one proposal: an i.i.d. uniform instance index per component.
    pub fn sample_proposal(&self, rng: &mut impl Rng) -> Proposal {
        let indices = (0..self.component_count()).map(|_| rng.gen_range(0..self.n)).collect();
        Proposal { indices }
    }

    fn check_proposal(&self, proposal: &Proposal) -> Result<()> {
        if proposal.indices.len() != self.component_count() {
            return Err(DcaError::Proposal(format!(
                "proposal has {} indices for {} components",
                proposal.indices.len(),
                self.component_count()
            )));
        }
        if let Some(&bad) = proposal.indices.iter().find(|&&i| i >= self.n) {
            return Err(DcaError::Proposal(format!(
                "proposal index {} out of range for n = {}",
                bad, self.n
            )));
        }
        Ok(())
    }

    /// Materialize the flat parameter vector selected by a proposal: slot s
    /// reads from instance `proposal[component_of(s)]`.
    pub fn assemble(&self, proposal: &Proposal) -> Result<Vec<f64>> {
        self.check_proposal(proposal)?;
        let mut flat = vec![0.0; self.total_slots()];
        for (c, comp) in self.partition.components.iter().enumerate() {
            let src = &self.instances[c][proposal.indices[c]];
            let mut cursor = 0;
            for r in &comp.ranges {
                flat[r.start..r.end].copy_from_slice(&src[cursor..cursor + r.len()]);
                cursor += r.len();
            }
        }
        Ok(flat)
    }

    /// Accumulate a flat gradient into the accumulator entries of exactly the
    /// instances the proposal selected. Unselected instances are untouched.
    pub fn scatter_gradients(
        &self,
        proposal: &Proposal,
        grads: &[f64],
        accumulator: &mut InstanceBuffers,
    ) -> Result<()> {
        self.check_proposal(proposal)?;
        if grads.len() != self.total_slots() {
            return Err(DcaError::Dimension(format!(
                "gradient view has {} slots, bank has {}",
                grads.len(),
                self.total_slots()
            )));
        }
        for (c, comp) in self.partition.components.iter().enumerate() {
            let dst = &mut accumulator.comps[c][proposal.indices[c]];
            let mut cursor = 0;
            for r in &comp.ranges {
                for (d, s) in dst[cursor..cursor + r.len()].iter_mut().zip(&grads[r.start..r.end])
                {
                    *d += *s;
                }
                cursor += r.len();
            }
        }
        Ok(())
    }

    /// n^component_count with an overflow flag once it leaves u64 range.
    pub fn count_proposals(&self) -> ProposalCount {
        let mut total: u64 = 1;
        for _ in 0..self.component_count() {
            match total.checked_mul(self.n as u64) {
                Some(t) => total = t,
                None => return ProposalCount::Overflow,
            }
        }
        ProposalCount::Exact(total)
    }

    /// Proposals used at inference: modelwise banks enumerate every member
    /// (no sampling noise); other granularities draw m random proposals.
    pub fn inference_proposals(&self, m: usize, rng: &mut impl Rng) -> Vec<Proposal> {
        if self.granularity() == Granularity::Modelwise {
            (0..self.n).map(|i| Proposal { indices: vec![i; self.component_count()] }).collect()
        } else {
            (0..m).map(|_| self.sample_proposal(rng)).collect()
        }
    }
}
