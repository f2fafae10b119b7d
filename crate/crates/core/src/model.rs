//! Residual-MLP architecture description and its partition into
//! aggregation components at five granularity levels.
//!
//! The base network is: stem dense layer, then trunks (each a plain dense
//! entry layer followed by residual blocks of two dense layers with an
//! identity skip), then a dense head producing class logits. Parameters of
//! each dense layer are laid out neuron-major as interleaved
//! `[w_row | bias]` blocks, so every component at every granularity owns a
//! contiguous slot range.

use crate::error::{DcaError, Result};
use crate::tensor::{ComputeGraph, Op};
use serde::{Deserialize, Serialize};

/// Architecture of the base classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub class_count: usize,
    pub hidden_width: usize,
    /// Residual blocks per trunk; one entry per trunk.
    pub trunks: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(DcaError::Config("model input_dim must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(DcaError::Config("model class_count must be >= 2".into()));
        }
        if self.hidden_width == 0 {
            return Err(DcaError::Config("model hidden_width must be positive".into()));
        }
        if self.trunks.is_empty() {
            return Err(DcaError::Config("model needs at least one trunk".into()));
        }
        if self.trunks.iter().any(|&b| b == 0) {
            return Err(DcaError::Config(
                "every trunk needs at least one residual block".into(),
            ));
        }
        Ok(())
    }

    /// Number of dense layers: stem + per trunk (entry + 2 per block) + head.
    pub fn layer_count(&self) -> usize {
        2 + self.trunks.iter().map(|b| 1 + 2 * b).sum::<usize>()
    }

    /// Total parameter slots (weights + biases).
    pub fn param_count(&self) -> usize {
        let w = self.hidden_width;
        let mut total = w * (self.input_dim + 1); // stem
        for &blocks in &self.trunks {
            total += w * (w + 1); // trunk entry
            total += blocks * 2 * w * (w + 1); // two dense layers per block
        }
        total += self.class_count * (w + 1); // head
        total
    }
}

/// Aggregation granularity, finest to coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Neuronwise,
    Layerwise,
    Blockwise,
    Trunkwise,
    Modelwise,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Neuronwise,
        Granularity::Layerwise,
        Granularity::Blockwise,
        Granularity::Trunkwise,
        Granularity::Modelwise,
    ];

    /// Fine-grain = neuronwise/layerwise; coarse-grain = block/trunk/model.
    pub fn is_fine_grain(self) -> bool {
        matches!(self, Granularity::Neuronwise | Granularity::Layerwise)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Neuronwise => "neuronwise",
            Granularity::Layerwise => "layerwise",
            Granularity::Blockwise => "blockwise",
            Granularity::Trunkwise => "trunkwise",
            Granularity::Modelwise => "modelwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neuronwise" => Ok(Granularity::Neuronwise),
            "layerwise" => Ok(Granularity::Layerwise),
            "blockwise" => Ok(Granularity::Blockwise),
            "trunkwise" => Ok(Granularity::Trunkwise),
            "modelwise" => Ok(Granularity::Modelwise),
            other => Err(DcaError::Config(format!("unknown granularity '{}'", other))),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Granularity::Neuronwise => 0,
            Granularity::Layerwise => 1,
            Granularity::Blockwise => 2,
            Granularity::Trunkwise => 3,
            Granularity::Modelwise => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Granularity::Neuronwise),
            1 => Ok(Granularity::Layerwise),
            2 => Ok(Granularity::Blockwise),
            3 => Ok(Granularity::Trunkwise),
            4 => Ok(Granularity::Modelwise),
            other => Err(DcaError::Format(format!("unknown granularity tag {}", other))),
        }
    }
}

/// Structural role of a dense layer, used to derive partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Stem,
    TrunkEntry { trunk: usize },
    BlockLayer { trunk: usize, block: usize, half: usize },
    Head,
}

/// One dense layer's location in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerInfo {
    pub role: LayerRole,
    pub offset: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerInfo {
    pub fn slot_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

/// Deterministic parameter layout: stem, trunks in order (entry first, then
/// blocks), head.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub layers: Vec<LayerInfo>,
    pub total_slots: usize,
}

/// Half-open slot range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRange {
    pub start: usize,
    pub end: usize,
}

impl SlotRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// One aggregation component: the parameter-slot ranges it owns.
#[derive(Debug, Clone)]
pub struct Component {
    pub ranges: Vec<SlotRange>,
}

impl Component {
    pub fn slot_count(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.ranges.iter().any(|r| slot >= r.start && slot < r.end)
    }
}

/// Disjoint cover of all parameter slots by components.
#[derive(Debug, Clone)]
pub struct Partition {
    pub granularity: Granularity,
    pub components: Vec<Component>,
    pub total_slots: usize,
}

impl Partition {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Map every slot to its owning component index.
    pub fn slot_owners(&self) -> Vec<usize> {
        let mut owners = vec![usize::MAX; self.total_slots];
        for (ci, comp) in self.components.iter().enumerate() {
            for r in &comp.ranges {
                for slot in r.start..r.end {
                    owners[slot] = ci;
                }
            }
        }
        owners
    }
}

/// Build the compute graph (ending in log-softmax over class logits) and the
/// parameter layout for a model spec.
pub fn build_model(spec: &ModelSpec) -> Result<(ComputeGraph, ParamLayout)> {
    spec.validate()?;
    let w = spec.hidden_width;
    let mut layers = Vec::new();
    let mut ops = vec![Op::Input];
    let mut offset = 0;
    let mut last = 0usize; // node index of current activation

    let push_dense =
        |ops: &mut Vec<Op>, layers: &mut Vec<LayerInfo>, offset: &mut usize, last: usize,
         role: LayerRole, in_dim: usize, out_dim: usize| {
            let info = LayerInfo { role, offset: *offset, in_dim, out_dim };
            ops.push(Op::Dense { input: last, offset: *offset, in_dim, out_dim });
            *offset += info.slot_count();
            layers.push(info);
            ops.len() - 1
        };

    // stem: dense + relu
    let d = push_dense(&mut ops, &mut layers, &mut offset, last, LayerRole::Stem, spec.input_dim, w);
    ops.push(Op::Relu { input: d });
    last = ops.len() - 1;

    for (t, &blocks) in spec.trunks.iter().enumerate() {
        // trunk entry: plain dense + relu (non-identity main branch)
        let d = push_dense(
            &mut ops, &mut layers, &mut offset, last,
            LayerRole::TrunkEntry { trunk: t }, w, w,
        );
        ops.push(Op::Relu { input: d });
        last = ops.len() - 1;

        for b in 0..blocks {
            // residual block: x + dense2(relu(dense1(x)))
            let skip = last;
            let d1 = push_dense(
                &mut ops, &mut layers, &mut offset, last,
                LayerRole::BlockLayer { trunk: t, block: b, half: 0 }, w, w,
            );
            ops.push(Op::Relu { input: d1 });
            let r = ops.len() - 1;
            let d2 = push_dense(
                &mut ops, &mut layers, &mut offset, r,
                LayerRole::BlockLayer { trunk: t, block: b, half: 1 }, w, w,
            );
            ops.push(Op::Add { lhs: skip, rhs: d2 });
            last = ops.len() - 1;
        }
    }

    // head: dense to logits, then log-softmax
    let d = push_dense(
        &mut ops, &mut layers, &mut offset, last,
        LayerRole::Head, w, spec.class_count,
    );
    ops.push(Op::LogSoftmax { input: d });

    debug_assert_eq!(offset, spec.param_count());
    debug_assert_eq!(layers.len(), spec.layer_count());
    let graph = ComputeGraph::from_ops(ops, spec.input_dim, offset)?;
    Ok((graph, ParamLayout { layers, total_slots: offset }))
}

/// Partition the model's parameter slots at the requested granularity.
pub fn partition(spec: &ModelSpec, g: Granularity) -> Result<Partition> {
    spec.validate()?;
    let (_, layout) = build_model(spec)?;
    let mut components: Vec<Component> = Vec::new();
    let single = |r: SlotRange| Component { ranges: vec![r] };

    match g {
        Granularity::Neuronwise => {
            // one component per output neuron: its weight row + bias entry
            for layer in &layout.layers {
                let stride = layer.in_dim + 1;
                for j in 0..layer.out_dim {
                    let start = layer.offset + j * stride;
                    components.push(single(SlotRange { start, end: start + stride }));
                }
            }
        }
        Granularity::Layerwise => {
            for layer in &layout.layers {
                components.push(single(SlotRange {
                    start: layer.offset,
                    end: layer.offset + layer.slot_count(),
                }));
            }
        }
        Granularity::Blockwise => {
            // plain layers (stem, trunk entries, head) stand alone; each
            // residual block's two layers form one component
            let mut i = 0;
            while i < layout.layers.len() {
                let layer = &layout.layers[i];
                match layer.role {
                    LayerRole::BlockLayer { .. } => {
                        let next = &layout.layers[i + 1];
                        components.push(single(SlotRange {
                            start: layer.offset,
                            end: next.offset + next.slot_count(),
                        }));
                        i += 2;
                    }
                    _ => {
                        components.push(single(SlotRange {
                            start: layer.offset,
                            end: layer.offset + layer.slot_count(),
                        }));
                        i += 1;
                    }
                }
            }
        }
        Granularity::Trunkwise => {
            // stem, each trunk (entry + its blocks), head
            let mut start = None;
            let mut current_trunk = None;
            for layer in &layout.layers {
                let trunk_of = |role: LayerRole| match role {
                    LayerRole::TrunkEntry { trunk } => Some(trunk),
                    LayerRole::BlockLayer { trunk, .. } => Some(trunk),
                    _ => None,
                };
                match trunk_of(layer.role) {
                    Some(t) => {
                        if current_trunk != Some(t) {
                            if let (Some(s), Some(_)) = (start, current_trunk) {
                                components.push(single(SlotRange { start: s, end: layer.offset }));
                            }
                            start = Some(layer.offset);
                            current_trunk = Some(t);
                        }
                    }
                    None => {
                        if let (Some(s), Some(_)) = (start, current_trunk) {
                            components.push(single(SlotRange { start: s, end: layer.offset }));
                            start = None;
                            current_trunk = None;
                        }
                        components.push(single(SlotRange {
                            start: layer.offset,
                            end: layer.offset + layer.slot_count(),
                        }));
                    }
                }
            }
            if let (Some(s), Some(_)) = (start, current_trunk) {
                components.push(single(SlotRange { start: s, end: layout.total_slots }));
            }
            // reorder: stem, trunks in order, head — already in layout order
        }
        Granularity::Modelwise => {
            components.push(single(SlotRange { start: 0, end: layout.total_slots }));
        }
    }

    Ok(Partition { granularity: g, components, total_slots: layout.total_slots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        // 1 trunk of 1 block, width 4, input 2, 3 classes
        ModelSpec { input_dim: 2, class_count: 3, hidden_width: 4, trunks: vec![1] }
    }

    #[test]
    fn layer_and_slot_counts_match_hand_arithmetic() {
        let spec = small_spec();
        assert_eq!(spec.layer_count(), 5);
        // stem 4*(2+1)=12, entry 4*5=20, block 2*20=40, head 3*5=15
        assert_eq!(spec.param_count(), 12 + 20 + 40 + 15);
        let (graph, layout) = build_model(&spec).unwrap();
        assert_eq!(graph.param_count(), spec.param_count());
        assert_eq!(layout.layers.len(), 5);
        assert_eq!(layout.total_slots, spec.param_count());
    }

    #[test]
    fn zero_width_is_config_error() {
        let spec = ModelSpec { input_dim: 2, class_count: 3, hidden_width: 0, trunks: vec![1] };
        assert!(matches!(build_model(&spec), Err(DcaError::Config(_))));
        let spec = ModelSpec { input_dim: 2, class_count: 3, hidden_width: 4, trunks: vec![0] };
        assert!(matches!(build_model(&spec), Err(DcaError::Config(_))));
    }

    #[test]
    fn identical_specs_give_identical_layouts() {
        let (_, a) = build_model(&small_spec()).unwrap();
        let (_, b) = build_model(&small_spec()).unwrap();
        assert_eq!(a.layers.len(), b.layers.len());
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x.offset, y.offset);
            assert_eq!(x.in_dim, y.in_dim);
            assert_eq!(x.out_dim, y.out_dim);
        }
    }

    #[test]
    fn component_counts_per_granularity() {
        let spec = small_spec();
        assert_eq!(partition(&spec, Granularity::Modelwise).unwrap().component_count(), 1);
        // trunkwise: stem + 1 trunk + head
        assert_eq!(partition(&spec, Granularity::Trunkwise).unwrap().component_count(), 3);
        // blockwise: stem, entry, block, head
        assert_eq!(partition(&spec, Granularity::Blockwise).unwrap().component_count(), 4);
        assert_eq!(partition(&spec, Granularity::Layerwise).unwrap().component_count(), 5);
        // neuronwise: 4 + 4 + 4 + 4 + 3 output neurons
        assert_eq!(partition(&spec, Granularity::Neuronwise).unwrap().component_count(), 19);
    }

    #[test]
    fn neuronwise_count_equals_fanout_sum_and_covers_all_slots() {
        let spec = ModelSpec { input_dim: 3, class_count: 3, hidden_width: 4, trunks: vec![2, 1] };
        let p = partition(&spec, Granularity::Neuronwise).unwrap();
        let (_, layout) = build_model(&spec).unwrap();
        let fanout: usize = layout.layers.iter().map(|l| l.out_dim).sum();
        assert_eq!(p.component_count(), fanout);
        // brute-force coverage: every slot owned exactly once
        let mut seen = vec![0usize; p.total_slots];
        for comp in &p.components {
            for r in &comp.ranges {
                for s in r.start..r.end {
                    seen[s] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn coverage_holds_at_every_granularity() {
        let spec = ModelSpec { input_dim: 2, class_count: 4, hidden_width: 3, trunks: vec![2, 2] };
        for g in Granularity::ALL {
            let p = partition(&spec, g).unwrap();
            let owners = p.slot_owners();
            assert!(
                owners.iter().all(|&o| o != usize::MAX),
                "{:?} leaves slots uncovered",
                g
            );
        }
    }

    #[test]
    fn refinement_is_monotone_up_the_hierarchy() {
        let spec = ModelSpec { input_dim: 2, class_count: 4, hidden_width: 3, trunks: vec![2, 1] };
        let chain = [
            Granularity::Neuronwise,
            Granularity::Layerwise,
            Granularity::Blockwise,
            Granularity::Trunkwise,
            Granularity::Modelwise,
        ];
        for pair in chain.windows(2) {
            let fine = partition(&spec, pair[0]).unwrap();
            let coarse = partition(&spec, pair[1]).unwrap();
            let coarse_owners = coarse.slot_owners();
            for comp in &fine.components {
                let mut owner = None;
                for r in &comp.ranges {
                    for s in r.start..r.end {
                        match owner {
                            None => owner = Some(coarse_owners[s]),
                            Some(o) => assert_eq!(
                                o, coarse_owners[s],
                                "{:?} component spans {:?} components",
                                pair[0], pair[1]
                            ),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn modelwise_single_component_covers_everything() {
        let spec = small_spec();
        let p = partition(&spec, Granularity::Modelwise).unwrap();
        assert_eq!(p.components[0].slot_count(), spec.param_count());
    }
}
