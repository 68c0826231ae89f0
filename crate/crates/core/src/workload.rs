//! Operator inventory and workload representation.
//!
//! A transformer training job is decomposed into the operators that run on
//! each pipeline stage. Every operator instance carries a short integer
//! feature vector (its workload representation) which is the input to the
//! per-operator latency regressors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::{partition_encoders, PartitionError, StageRole};

/// Granularity that the vocabulary is padded to, per model-parallel rank.
pub const VOCAB_ALIGNMENT: u64 = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{op} is not part of this model: {reason}")]
    OpMismatch { op: OperatorKind, reason: String },
    #[error("non-integral partition: {0}")]
    NonIntegral(String),
    #[error("{op} expects {expected} features, got {got}")]
    Arity {
        op: OperatorKind,
        expected: usize,
        got: usize,
    },
    #[error("{op} feature {index} must be positive")]
    NonPositiveFeature { op: OperatorKind, index: usize },
    #[error("{op} does not run in direction {direction}")]
    BadDirection { op: OperatorKind, direction: Direction },
    #[error("{op} needs an explicit entry count")]
    MissingEntries { op: OperatorKind },
    #[error("stage {stage} out of range for {pp} pipeline stages")]
    StageOutOfRange { stage: usize, pp: u64 },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    #[serde(rename = "RMSNorm")]
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "FP16")]
    Fp16,
    #[serde(rename = "BF16")]
    Bf16,
    #[serde(rename = "FP32")]
    Fp32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Fp16 | Precision::Bf16 => 2,
            Precision::Fp32 => 4,
        }
    }
}

/// Transformer architecture plus the training hyperparameters that shape
/// operator workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_name")]
    pub name: String,
    pub hidden_dim: u64,
    pub seq_len: u64,
    pub attention_heads: u64,
    pub num_encoders: u64,
    pub vocab_size_raw: u64,
    pub encoder_fwd_syncs: u32,
    pub encoder_bwd_syncs: u32,
    pub fused_softmax: bool,
    pub flash_attention: bool,
    #[serde(default)]
    pub rope: bool,
    pub norm_kind: NormKind,
    pub precision: Precision,
    pub micro_batch: u64,
    pub micro_batches_per_update: u64,
}

fn default_model_name() -> String {
    "model".to_string()
}

impl ModelConfig {
    pub fn gpt_20b() -> Self {
        ModelConfig {
            name: "GPT-20B".into(),
            hidden_dim: 6144,
            seq_len: 2048,
            attention_heads: 64,
            num_encoders: 44,
            vocab_size_raw: 50257,
            encoder_fwd_syncs: 1,
            encoder_bwd_syncs: 2,
            fused_softmax: true,
            flash_attention: false,
            rope: false,
            norm_kind: NormKind::LayerNorm,
            precision: Precision::Fp16,
            micro_batch: 4,
            micro_batches_per_update: 16,
        }
    }

    pub fn llama_13b() -> Self {
        ModelConfig {
            name: "LLaMA-13B".into(),
            hidden_dim: 5120,
            seq_len: 2048,
            attention_heads: 40,
            num_encoders: 40,
            encoder_fwd_syncs: 2,
            rope: true,
            norm_kind: NormKind::RmsNorm,
            ..Self::gpt_20b()
        }
    }

    pub fn llemma_7b() -> Self {
        ModelConfig {
            name: "Llemma-7B".into(),
            hidden_dim: 4096,
            seq_len: 4096,
            attention_heads: 32,
            num_encoders: 32,
            encoder_fwd_syncs: 2,
            fused_softmax: false,
            flash_attention: true,
            rope: true,
            norm_kind: NormKind::RmsNorm,
            micro_batches_per_update: 8,
            ..Self::gpt_20b()
        }
    }

    /// Looks up one of the built-in model presets by name (case-insensitive).
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "gpt-20b" => Some(Self::gpt_20b()),
            "llama-13b" => Some(Self::llama_13b()),
            "llemma-7b" => Some(Self::llemma_7b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("seq_len", self.seq_len),
            ("attention_heads", self.attention_heads),
            ("num_encoders", self.num_encoders),
            ("vocab_size_raw", self.vocab_size_raw),
            ("micro_batch", self.micro_batch),
            ("micro_batches_per_update", self.micro_batches_per_update),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(WorkloadError::InvalidConfig(format!("{field} must be positive")));
            }
        }
        for (field, syncs) in [
            ("encoder_fwd_syncs", self.encoder_fwd_syncs),
            ("encoder_bwd_syncs", self.encoder_bwd_syncs),
        ] {
            if !(1..=2).contains(&syncs) {
                return Err(WorkloadError::InvalidConfig(format!("{field} must be 1 or 2")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(WorkloadError::NonIntegral(format!(
                "hidden_dim {} not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.flash_attention && self.fused_softmax {
            return Err(WorkloadError::InvalidConfig(
                "flash_attention and fused_softmax are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.attention_heads
    }

    pub fn norm_op(&self) -> OperatorKind {
        match self.norm_kind {
            NormKind::LayerNorm => OperatorKind::LayerNorm,
            NormKind::RmsNorm => OperatorKind::RmsNorm,
        }
    }

    /// Attention operators in execution order for this model's attention path.
    pub fn attention_ops(&self) -> &'static [OperatorKind] {
        use OperatorKind::*;
        if self.flash_attention {
            &[FlashAttention]
        } else if self.fused_softmax {
            &[Qkt, FusedSoftmax, VMul]
        } else {
            &[Qkt, Fillmask, Softmax, VMul]
        }
    }
}

/// Pipeline / model / data parallel degrees, written `pp-mp-dp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelLayout {
    pub pp: u64,
    pub mp: u64,
    pub dp: u64,
}

impl ParallelLayout {
    pub fn new(pp: u64, mp: u64, dp: u64) -> Self {
        ParallelLayout { pp, mp, dp }
    }

    pub fn world_size(&self) -> u64 {
        self.pp * self.mp * self.dp
    }

    /// Checks that heads and hidden dimension split evenly over `mp`.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<(), WorkloadError> {
        if self.pp == 0 || self.mp == 0 || self.dp == 0 {
            return Err(WorkloadError::InvalidConfig(format!(
                "layout {self} has a zero degree"
            )));
        }
        if !model.attention_heads.is_multiple_of(self.mp) {
            return Err(WorkloadError::NonIntegral(format!(
                "mp={} does not divide attention_heads={}",
                self.mp, model.attention_heads
            )));
        }
        if !model.hidden_dim.is_multiple_of(self.mp) {
            return Err(WorkloadError::NonIntegral(format!(
                "mp={} does not divide hidden_dim={}",
                self.mp, model.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn validate_cluster(&self, cluster: &ClusterSpec) -> Result<(), WorkloadError> {
        if self.world_size() != cluster.total_gpus() {
            return Err(WorkloadError::InvalidConfig(format!(
                "layout {self} needs {} GPUs but cluster {} has {}",
                self.world_size(),
                cluster.hardware_id,
                cluster.total_gpus()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ParallelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.pp, self.mp, self.dp)
    }
}

impl FromStr for ParallelLayout {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let bad = || WorkloadError::InvalidConfig(format!("layout `{s}` is not of the form pp-mp-dp"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut degrees = [0u64; 3];
        for (slot, part) in degrees.iter_mut().zip(&parts) {
            *slot = part.parse().map_err(|_| bad())?;
        }
        Ok(ParallelLayout::new(degrees[0], degrees[1], degrees[2]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: u64,
    pub gpus_per_node: u64,
    pub hardware_id: String,
    /// Intra-node bandwidth in bytes/s. Informational only.
    #[serde(default)]
    pub intra_bw: f64,
    /// Inter-node bandwidth in bytes/s. Informational only.
    #[serde(default)]
    pub inter_bw: f64,
}

impl ClusterSpec {
    pub fn new(nodes: u64, gpus_per_node: u64, hardware_id: impl Into<String>) -> Self {
        ClusterSpec {
            nodes,
            gpus_per_node,
            hardware_id: hardware_id.into(),
            intra_bw: 0.0,
            inter_bw: 0.0,
        }
    }

    pub fn perlmutter() -> Self {
        ClusterSpec {
            nodes: 32,
            gpus_per_node: 4,
            hardware_id: "a100-sxm4".into(),
            intra_bw: 600e9,
            inter_bw: 25e9,
        }
    }

    pub fn vista() -> Self {
        ClusterSpec {
            nodes: 128,
            gpus_per_node: 1,
            hardware_id: "gh200".into(),
            intra_bw: 900e9,
            inter_bw: 50e9,
        }
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes * self.gpus_per_node
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.nodes == 0 || self.gpus_per_node == 0 {
            return Err(WorkloadError::InvalidConfig(
                "cluster needs at least one node and one GPU per node".into(),
            ));
        }
        Ok(())
    }
}

/// Placement of a communicator group: how many nodes it touches and how many
/// of its ranks share a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupTopology {
    pub nodes: u64,
    pub gpus_per_node: u64,
}

impl GroupTopology {
    pub fn processes(&self) -> u64 {
        self.nodes * self.gpus_per_node
    }
}

/// Topology of a group of `size` ranks spaced `stride` apart when ranks are
/// packed onto nodes of `gpus_per_node` GPUs in order.
pub fn group_topology(size: u64, stride: u64, gpus_per_node: u64) -> GroupTopology {
    let gpn = gpus_per_node.max(1);
    let stride = stride.max(1);
    let mut per_node: Vec<(u64, u64)> = Vec::new();
    for i in 0..size.max(1) {
        let node = i * stride / gpn;
        match per_node.last_mut() {
            Some((n, count)) if *n == node => *count += 1,
            _ => per_node.push((node, 1)),
        }
    }
    GroupTopology {
        nodes: per_node.len() as u64,
        gpus_per_node: per_node.iter().map(|&(_, c)| c).max().unwrap_or(1),
    }
}

/// Pads the vocabulary to a multiple of `128 * mp`.
pub fn align_vocab(vocab_raw: u64, mp: u64) -> u64 {
    let factor = VOCAB_ALIGNMENT * mp.max(1);
    vocab_raw.div_ceil(factor) * factor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OperatorKind {
    Embedding,
    LayerNorm,
    RmsNorm,
    Linear1,
    Rope,
    Qkt,
    Fillmask,
    Softmax,
    FusedSoftmax,
    VMul,
    FlashAttention,
    Linear2,
    Linear3,
    Glue,
    Linear4,
    FinalLinear,
    ParallelCrossEntropy,
    MpAllReduce,
    DpAllReduce,
    DpAllGather,
    PpP2p,
    Optimizer,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 22] = [
        OperatorKind::Embedding,
        OperatorKind::LayerNorm,
        OperatorKind::RmsNorm,
        OperatorKind::Linear1,
        OperatorKind::Rope,
        OperatorKind::Qkt,
        OperatorKind::Fillmask,
        OperatorKind::Softmax,
        OperatorKind::FusedSoftmax,
        OperatorKind::VMul,
        OperatorKind::FlashAttention,
        OperatorKind::Linear2,
        OperatorKind::Linear3,
        OperatorKind::Glue,
        OperatorKind::Linear4,
        OperatorKind::FinalLinear,
        OperatorKind::ParallelCrossEntropy,
        OperatorKind::MpAllReduce,
        OperatorKind::DpAllReduce,
        OperatorKind::DpAllGather,
        OperatorKind::PpP2p,
        OperatorKind::Optimizer,
    ];

    pub fn name(self) -> &'static str {
        use OperatorKind::*;
        match self {
            Embedding => "Embedding",
            LayerNorm => "LayerNorm",
            RmsNorm => "RMSNorm",
            Linear1 => "Linear1",
            Rope => "RoPE",
            Qkt => "QKT",
            Fillmask => "Fillmask",
            Softmax => "Softmax",
            FusedSoftmax => "FusedSoftmax",
            VMul => "VMul",
            FlashAttention => "FlashAttention",
            Linear2 => "Linear2",
            Linear3 => "Linear3",
            Glue => "Glue",
            Linear4 => "Linear4",
            FinalLinear => "FinalLinear",
            ParallelCrossEntropy => "ParallelCrossEntropy",
            MpAllReduce => "MPAllReduce",
            DpAllReduce => "DPAllReduce",
            DpAllGather => "DPAllGather",
            PpP2p => "PPP2P",
            Optimizer => "Optimizer",
        }
    }

    /// Number of workload features for this operator.
    pub fn arity(self) -> usize {
        use OperatorKind::*;
        match self {
            Rope | Qkt | Fillmask | Softmax | VMul | FlashAttention => 4,
            _ => 3,
        }
    }

    pub fn is_comm(self) -> bool {
        matches!(
            self,
            OperatorKind::MpAllReduce
                | OperatorKind::DpAllReduce
                | OperatorKind::DpAllGather
                | OperatorKind::PpP2p
        )
    }

    /// Directions in which the operator is benchmarked and predicted.
    pub fn directions(self) -> &'static [Direction] {
        if self.is_comm() || self == OperatorKind::Optimizer {
            &[Direction::Na]
        } else {
            &[Direction::Fwd, Direction::Bwd]
        }
    }

    /// Operators driven by the compute sampling grid.
    pub fn is_compute_grid_op(self) -> bool {
        !self.is_comm() && self != OperatorKind::Optimizer
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorKind::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Fwd,
    Bwd,
    Na,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
            Direction::Na => "na",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fwd" => Ok(Direction::Fwd),
            "bwd" => Ok(Direction::Bwd),
            "na" => Ok(Direction::Na),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

/// One operator invocation, keyed by its workload features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkloadVector {
    pub op: OperatorKind,
    pub direction: Direction,
    pub feats: Vec<u64>,
}

impl WorkloadVector {
    pub fn new(op: OperatorKind, direction: Direction, feats: Vec<u64>) -> Result<Self, WorkloadError> {
        if feats.len() != op.arity() {
            return Err(WorkloadError::Arity {
                op,
                expected: op.arity(),
                got: feats.len(),
            });
        }
        if let Some(index) = feats.iter().position(|&f| f == 0) {
            return Err(WorkloadError::NonPositiveFeature { op, index });
        }
        if !op.directions().contains(&direction) {
            return Err(WorkloadError::BadDirection { op, direction });
        }
        Ok(WorkloadVector { op, direction, feats })
    }

    pub fn feats_f64(&self) -> Vec<f64> {
        self.feats.iter().map(|&f| f as f64).collect()
    }
}

impl fmt::Display for WorkloadVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}{:?}", self.op, self.direction, self.feats)
    }
}

/// The shape parameters a compute operator's features are derived from.
///
/// This is the subset of a model + layout that the sampling grids vary, so
/// benchmark generation and inventory construction share one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpShape {
    pub b: u64,
    pub l: u64,
    pub d: u64,
    pub h: u64,
    pub mp: u64,
    /// Aligned vocabulary size.
    pub v: u64,
}

impl OpShape {
    pub fn from_model(model: &ModelConfig, layout: &ParallelLayout) -> Self {
        OpShape {
            b: model.micro_batch,
            l: model.seq_len,
            d: model.hidden_dim,
            h: model.attention_heads,
            mp: layout.mp,
            v: align_vocab(model.vocab_size_raw, layout.mp),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if [self.b, self.l, self.d, self.h, self.mp, self.v].contains(&0) {
            return Err(WorkloadError::InvalidConfig("shape parameters must be positive".into()));
        }
        let checks = [
            (self.d % self.h, "d not divisible by h"),
            (self.h % self.mp, "h not divisible by mp"),
            (self.d % self.mp, "d not divisible by mp"),
            (self.v % self.mp, "vocab not divisible by mp"),
        ];
        for (rem, what) in checks {
            if rem != 0 {
                return Err(WorkloadError::NonIntegral(what.into()));
            }
        }
        Ok(())
    }

    /// Table of workload features for every non-communication operator.
    pub fn compute_feats(&self, op: OperatorKind) -> Option<Vec<u64>> {
        use OperatorKind::*;
        let OpShape { b, l, d, h, mp, v } = *self;
        let bl = b * l;
        let hm = h / mp;
        let dh = d / h;
        let feats = match op {
            Embedding => vec![bl, v / mp, d],
            LayerNorm | RmsNorm => vec![b, l, d],
            Linear1 => vec![bl, d, 3 * d / mp],
            Rope => vec![b, l, hm, dh],
            Qkt => vec![b * hm, l, dh, l],
            Fillmask => vec![b, hm, l, d],
            Softmax => vec![b, hm, l, l],
            FusedSoftmax => vec![b * hm, l, l],
            VMul => vec![b * hm, l, l, dh],
            FlashAttention => vec![b, l, hm, dh],
            Linear2 => vec![bl, d / mp, d],
            Linear3 => vec![bl, d, 4 * d / mp],
            Glue => vec![b, l, 4 * d / mp],
            Linear4 => vec![bl, 4 * d / mp, d],
            FinalLinear => vec![bl, d, v / mp],
            ParallelCrossEntropy => vec![b, l, v / mp],
            MpAllReduce | DpAllReduce | DpAllGather | PpP2p | Optimizer => return None,
        };
        Some(feats)
    }
}

fn check_op_in_model(op: OperatorKind, model: &ModelConfig) -> Result<(), WorkloadError> {
    use OperatorKind::*;
    let mismatch = |reason: &str| {
        Err(WorkloadError::OpMismatch {
            op,
            reason: reason.to_string(),
        })
    };
    match op {
        Rope if !model.rope => mismatch("model does not use rotary embeddings"),
        LayerNorm if model.norm_kind != NormKind::LayerNorm => mismatch("model uses RMSNorm"),
        RmsNorm if model.norm_kind != NormKind::RmsNorm => mismatch("model uses LayerNorm"),
        Qkt | Fillmask | Softmax | FusedSoftmax | VMul | FlashAttention
            if !model.attention_ops().contains(&op) =>
        {
            mismatch("not on this model's attention path")
        }
        _ => Ok(()),
    }
}

/// Builds the workload vector of one operator for a concrete configuration.
///
/// For `DPAllReduce`/`DPAllGather`, `extra` is the number of entries to
/// reduce or gather. For `Optimizer`, `extra` is the number of encoders held
/// by the stage (defaults to the whole model).
pub fn workload_vector(
    op: OperatorKind,
    direction: Direction,
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    extra: Option<u64>,
) -> Result<WorkloadVector, WorkloadError> {
    use OperatorKind::*;
    model.validate()?;
    layout.validate_for(model)?;
    check_op_in_model(op, model)?;
    let shape = OpShape::from_model(model, layout);
    let gpn = cluster.gpus_per_node;
    let feats = match op {
        MpAllReduce => {
            let topo = group_topology(layout.mp, 1, gpn);
            vec![shape.b * shape.l * shape.d, topo.nodes, topo.gpus_per_node]
        }
        DpAllReduce | DpAllGather => {
            let entries = extra.ok_or(WorkloadError::MissingEntries { op })?;
            let topo = group_topology(layout.dp, layout.mp, gpn);
            vec![entries, topo.nodes, topo.gpus_per_node]
        }
        PpP2p => {
            let topo = group_topology(2, layout.mp * layout.dp, gpn);
            vec![shape.b * shape.l * shape.d / layout.mp, topo.nodes, topo.gpus_per_node]
        }
        Optimizer => {
            let encoders = extra.unwrap_or(model.num_encoders).max(1);
            vec![layout.mp, shape.d, encoders]
        }
        _ => shape.compute_feats(op).expect("compute operator"),
    };
    WorkloadVector::new(op, direction, feats)
}

/// An operator instance together with how many times it runs per micro-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InventoryItem {
    pub vector: WorkloadVector,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInventory {
    pub stage_index: usize,
    pub role: StageRole,
    pub encoders: u64,
    /// Forward pass operators per micro-batch, including the sender-side P2P.
    pub forward: Vec<InventoryItem>,
    /// Backward pass operators per micro-batch, including the sender-side P2P.
    pub backward: Vec<InventoryItem>,
}

impl StageInventory {
    pub fn items(&self, direction: Direction) -> &[InventoryItem] {
        match direction {
            Direction::Bwd => &self.backward,
            _ => &self.forward,
        }
    }

    /// Total operator invocations in one direction.
    pub fn op_count(&self, direction: Direction) -> u64 {
        self.items(direction).iter().map(|i| i.count).sum()
    }

    pub fn count_of(&self, op: OperatorKind, direction: Direction) -> u64 {
        self.items(direction)
            .iter()
            .filter(|i| i.vector.op == op)
            .map(|i| i.count)
            .sum()
    }
}

/// The operators of one encoder block in execution order.
///
/// Tensor-parallel all-reduces are omitted when `mp == 1` since no partial
/// sums exist to reduce.
pub fn encoder_block(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    direction: Direction,
) -> Result<Vec<InventoryItem>, WorkloadError> {
    use OperatorKind::*;
    let syncs = match direction {
        Direction::Bwd => model.encoder_bwd_syncs,
        _ => model.encoder_fwd_syncs,
    } as u64;
    let norm = model.norm_op();
    let mut ops: Vec<(OperatorKind, u64)> = vec![(norm, 1), (Linear1, 1)];
    if model.rope {
        ops.push((Rope, 1));
    }
    ops.extend(model.attention_ops().iter().map(|&op| (op, 1)));
    ops.push((Linear2, 1));
    if layout.mp > 1 {
        ops.push((MpAllReduce, syncs));
    }
    ops.extend([(norm, 1), (Linear3, 1), (Glue, 1), (Linear4, 1)]);

    ops.into_iter()
        .map(|(op, count)| {
            let dir = if op.is_comm() { Direction::Na } else { direction };
            Ok(InventoryItem {
                vector: workload_vector(op, dir, model, layout, cluster, None)?,
                count,
            })
        })
        .collect()
}

fn push_item(items: &mut Vec<InventoryItem>, vector: WorkloadVector, count: u64) {
    if count == 0 {
        return;
    }
    items.push(InventoryItem { vector, count });
}

fn direction_inventory(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    role: StageRole,
    encoders: u64,
    direction: Direction,
) -> Result<Vec<InventoryItem>, WorkloadError> {
    use OperatorKind::*;
    let vec = |op: OperatorKind| {
        let dir = if op.is_comm() { Direction::Na } else { direction };
        workload_vector(op, dir, model, layout, cluster, None)
    };
    let mut items = Vec::new();
    let has_head = matches!(role, StageRole::First | StageRole::Solo);
    let has_tail = matches!(role, StageRole::Last | StageRole::Solo);
    if has_head {
        push_item(&mut items, vec(Embedding)?, 1);
    }
    if encoders > 0 {
        for item in encoder_block(model, layout, cluster, direction)? {
            push_item(&mut items, item.vector, item.count * encoders);
        }
    }
    if has_tail {
        push_item(&mut items, vec(model.norm_op())?, 1);
        push_item(&mut items, vec(FinalLinear)?, 1);
        push_item(&mut items, vec(ParallelCrossEntropy)?, 1);
    }
    // Activations flow downstream in the forward pass and gradients flow
    // upstream in the backward pass; the sender pays for the transfer.
    let sends = match direction {
        Direction::Bwd => matches!(role, StageRole::Middle | StageRole::Last),
        _ => matches!(role, StageRole::First | StageRole::Middle),
    };
    if sends {
        push_item(&mut items, vec(PpP2p)?, 1);
    }
    Ok(items)
}

/// Operator inventory of one pipeline stage.
pub fn stage_inventory(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    stage_index: usize,
) -> Result<StageInventory, WorkloadError> {
    model.validate()?;
    layout.validate_for(model)?;
    let partition = partition_encoders(model.num_encoders, layout.pp)?;
    if stage_index >= partition.encoders_per_stage.len() {
        return Err(WorkloadError::StageOutOfRange {
            stage: stage_index,
            pp: layout.pp,
        });
    }
    let role = partition.roles[stage_index];
    let encoders = partition.encoders_per_stage[stage_index];
    Ok(StageInventory {
        stage_index,
        role,
        encoders,
        forward: direction_inventory(model, layout, cluster, role, encoders, Direction::Fwd)?,
        backward: direction_inventory(model, layout, cluster, role, encoders, Direction::Bwd)?,
    })
}
