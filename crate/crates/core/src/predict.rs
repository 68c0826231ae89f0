//! Composition of per-operator latencies into stage times, the per-update
//! runtime breakdown and configuration sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchkit::{synth_latency, SynthHardwareModel};
use crate::partition::{partition_encoders, stage_param_count, PartitionError};
use crate::regress::{self, RegressError, TrainedRegressor};
use crate::report::{sig6, write_atomic};
use crate::timeline::{closed_form_runtime, StageTimes};
use crate::workload::{
    encoder_block, stage_inventory, workload_vector, ClusterSpec, Direction, InventoryItem,
    ModelConfig, OperatorKind, ParallelLayout, WorkloadError, WorkloadVector,
};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("no regressor for {op}/{direction}")]
    MissingRegressor { op: OperatorKind, direction: Direction },
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error("bank error: {0}")]
    Bank(String),
}

impl PredictError {
    /// Short category name used in sweep reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PredictError::MissingRegressor { .. } => "MissingRegressor",
            PredictError::Infeasible(_) => "InfeasiblePartition",
            PredictError::Config(_) => "InvalidConfig",
            PredictError::Regress(_) => "RegressorError",
            PredictError::Bank(_) => "BankError",
        }
    }
}

impl From<WorkloadError> for PredictError {
    fn from(e: WorkloadError) -> Self {
        match e {
            WorkloadError::InvalidConfig(_)
            | WorkloadError::BadDirection { .. }
            | WorkloadError::Arity { .. }
            | WorkloadError::NonPositiveFeature { .. }
            | WorkloadError::OpMismatch { .. } => PredictError::Config(e.to_string()),
            _ => PredictError::Infeasible(e.to_string()),
        }
    }
}

impl From<PartitionError> for PredictError {
    fn from(e: PartitionError) -> Self {
        PredictError::Infeasible(e.to_string())
    }
}

/// Latency of one operator invocation in microseconds.
pub trait LatencySource: Sync {
    fn latency(&self, vec: &WorkloadVector) -> Result<OpLatency, PredictError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpLatency {
    pub us: f64,
    pub extrapolated: bool,
}

/// Exact noise-free latencies from the synthetic hardware model.
#[derive(Debug, Clone)]
pub struct OracleSource {
    hw: SynthHardwareModel,
}

impl OracleSource {
    pub fn new(hw: &SynthHardwareModel) -> Self {
        OracleSource {
            hw: SynthHardwareModel {
                noise_sigma: 0.0,
                ..hw.clone()
            },
        }
    }
}

impl LatencySource for OracleSource {
    fn latency(&self, vec: &WorkloadVector) -> Result<OpLatency, PredictError> {
        Ok(OpLatency {
            us: synth_latency(vec, &self.hw, 0),
            extrapolated: false,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankIndex {
    hardware_id: String,
    models: Vec<BankEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankEntry {
    op: String,
    direction: Direction,
    file: String,
}

/// Trained regressors keyed by (operator, direction).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressorBank {
    pub hardware_id: String,
    pub models: BTreeMap<(OperatorKind, Direction), TrainedRegressor>,
}

pub const BANK_INDEX: &str = "bank.toml";

pub fn model_file_name(op: OperatorKind, direction: Direction) -> String {
    format!("{}_{}.model", op.name(), direction)
}

impl RegressorBank {
    pub fn new(hardware_id: impl Into<String>) -> Self {
        RegressorBank {
            hardware_id: hardware_id.into(),
            models: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, model: TrainedRegressor) {
        self.models.insert((model.op, model.direction), model);
    }

    /// A bank answering `value` microseconds for every operator.
    pub fn constant(value: f64) -> Self {
        let mut bank = RegressorBank::new("constant");
        for op in OperatorKind::ALL {
            for &dir in op.directions() {
                bank.insert(TrainedRegressor::constant(op, dir, value));
            }
        }
        bank
    }

    /// Text of the `bank.toml` index.
    pub fn index_toml(&self) -> String {
        let index = BankIndex {
            hardware_id: self.hardware_id.clone(),
            models: self
                .models
                .keys()
                .map(|&(op, direction)| BankEntry {
                    op: op.name().to_string(),
                    direction,
                    file: model_file_name(op, direction),
                })
                .collect(),
        };
        toml::to_string(&index).expect("bank index serializes")
    }

    /// Writes one model file per regressor plus the index into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (&(op, direction), model) in &self.models {
            let mut buf = Vec::new();
            regress::write_model(&mut buf, model).map_err(std::io::Error::other)?;
            write_atomic(&dir.join(model_file_name(op, direction)), &buf)?;
        }
        write_atomic(&dir.join(BANK_INDEX), self.index_toml().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, PredictError> {
        let index_path = dir.join(BANK_INDEX);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| PredictError::Bank(format!("{}: {e}", index_path.display())))?;
        let index: BankIndex = toml::from_str(&text)
            .map_err(|e| PredictError::Bank(format!("{}: {e}", index_path.display())))?;
        let mut bank = RegressorBank::new(index.hardware_id);
        for entry in index.models {
            let op: OperatorKind = entry.op.parse().map_err(PredictError::Bank)?;
            let path = dir.join(&entry.file);
            let model = regress::load_model(&path)
                .map_err(|e| PredictError::Bank(format!("{}: {e}", path.display())))?;
            if model.op != op || model.direction != entry.direction {
                return Err(PredictError::Bank(format!(
                    "{} holds {}/{}, index says {}/{}",
                    path.display(),
                    model.op,
                    model.direction,
                    op,
                    entry.direction
                )));
            }
            bank.insert(model);
        }
        Ok(bank)
    }
}

impl LatencySource for RegressorBank {
    fn latency(&self, vec: &WorkloadVector) -> Result<OpLatency, PredictError> {
        match self.models.get(&(vec.op, vec.direction)) {
            Some(model) => {
                let p = model.predict(vec)?;
                Ok(OpLatency {
                    us: p.latency_us,
                    extrapolated: p.extrapolated,
                })
            }
            // reshape-only block: free unless it was benchmarked
            None if vec.op == OperatorKind::Glue => Ok(OpLatency {
                us: 0.0,
                extrapolated: false,
            }),
            None => Err(PredictError::MissingRegressor {
                op: vec.op,
                direction: vec.direction,
            }),
        }
    }
}

/// Wraps another source and multiplies every latency by a constant.
pub struct Scaled<'a, S: LatencySource> {
    pub inner: &'a S,
    pub factor: f64,
}

impl<S: LatencySource> LatencySource for Scaled<'_, S> {
    fn latency(&self, vec: &WorkloadVector) -> Result<OpLatency, PredictError> {
        let mut l = self.inner.latency(vec)?;
        l.us *= self.factor;
        Ok(l)
    }
}

struct Accumulator<'a, S: LatencySource> {
    source: &'a S,
    warnings: Vec<String>,
}

impl<S: LatencySource> Accumulator<'_, S> {
    fn one(&mut self, vec: &WorkloadVector) -> Result<f64, PredictError> {
        let l = self.source.latency(vec)?;
        if l.extrapolated {
            let w = format!("{}/{} {:?} outside training range", vec.op, vec.direction, vec.feats);
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
        }
        Ok(l.us)
    }

    fn sum(&mut self, items: &[InventoryItem]) -> Result<f64, PredictError> {
        let mut total = 0.0;
        for item in items {
            total += item.count as f64 * self.one(&item.vector)?;
        }
        Ok(total)
    }
}

const US: f64 = 1e-6;

/// Stage times plus the pieces the breakdown reports separately.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDetail {
    pub times: StageTimes,
    /// Parameter all-gather share of each stage's update, seconds.
    pub dp_allgather: Vec<f64>,
    pub param_counts: Vec<u64>,
    pub warnings: Vec<String>,
}

fn check_layout(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
) -> Result<(), PredictError> {
    model.validate()?;
    cluster.validate()?;
    layout.validate_for(model)?;
    layout.validate_cluster(cluster)?;
    Ok(())
}

/// Per-stage forward, backward, gradient all-reduce and update times.
pub fn stage_times<S: LatencySource>(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    source: &S,
) -> Result<StageDetail, PredictError> {
    check_layout(model, layout, cluster)?;
    let partition = partition_encoders(model.num_encoders, layout.pp)?;
    let mut acc = Accumulator {
        source,
        warnings: Vec::new(),
    };
    let stages = partition.stages();
    let mut times = StageTimes {
        fwd: Vec::with_capacity(stages),
        bwd: Vec::with_capacity(stages),
        update: Vec::with_capacity(stages),
        dp_allreduce: Vec::with_capacity(stages),
    };
    let mut dp_allgather = Vec::with_capacity(stages);
    let mut param_counts = Vec::with_capacity(stages);
    for s in 0..stages {
        let inv = stage_inventory(model, layout, cluster, s)?;
        times.fwd.push(acc.sum(&inv.forward)? * US);
        times.bwd.push(acc.sum(&inv.backward)? * US);

        let params = stage_param_count(&partition, model, layout, s)?.param_count;
        param_counts.push(params);
        let optimizer = workload_vector(
            OperatorKind::Optimizer,
            Direction::Na,
            model,
            layout,
            cluster,
            Some(inv.encoders),
        )?;
        let opt_s = acc.one(&optimizer)? * US;
        let (gather_s, reduce_s) = if layout.dp > 1 {
            let gather = workload_vector(
                OperatorKind::DpAllGather,
                Direction::Na,
                model,
                layout,
                cluster,
                Some((params / layout.dp).max(1)),
            )?;
            let reduce = workload_vector(
                OperatorKind::DpAllReduce,
                Direction::Na,
                model,
                layout,
                cluster,
                Some(params),
            )?;
            (acc.one(&gather)? * US, acc.one(&reduce)? * US)
        } else {
            (0.0, 0.0)
        };
        times.update.push(opt_s + gather_s);
        times.dp_allreduce.push(reduce_s);
        dp_allgather.push(gather_s);
    }
    Ok(StageDetail {
        times,
        dp_allgather,
        param_counts,
        warnings: acc.warnings,
    })
}

/// Predicted time of one parameter update, split into reported components.
/// All times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimelineBreakdown {
    /// One encoder block's forward pass.
    pub encoder_fwd: f64,
    /// One encoder block's backward pass.
    pub encoder_bwd: f64,
    pub stage_fwd_max: f64,
    pub stage_bwd_max: f64,
    pub dp_allreduce_first_stage: f64,
    /// All-gather share of the slowest stage update.
    pub dp_allgather_max_update: f64,
    pub max_update: f64,
    /// One tensor-parallel all-reduce of the encoder activations.
    pub mp_allreduce: f64,
    /// One pipeline send of a micro-batch's activations.
    pub pp_p2p: f64,
    pub overall: f64,
    pub stages: u64,
    pub micro_batches: u64,
}

pub const COMPONENTS: [&str; 10] = [
    "encoder_fwd",
    "encoder_bwd",
    "stage_fwd_max",
    "stage_bwd_max",
    "dp_allreduce_first_stage",
    "dp_allgather_max_update",
    "max_update",
    "mp_allreduce",
    "pp_p2p",
    "overall",
];

impl TimelineBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            (COMPONENTS[0], self.encoder_fwd),
            (COMPONENTS[1], self.encoder_bwd),
            (COMPONENTS[2], self.stage_fwd_max),
            (COMPONENTS[3], self.stage_bwd_max),
            (COMPONENTS[4], self.dp_allreduce_first_stage),
            (COMPONENTS[5], self.dp_allgather_max_update),
            (COMPONENTS[6], self.max_update),
            (COMPONENTS[7], self.mp_allreduce),
            (COMPONENTS[8], self.pp_p2p),
            (COMPONENTS[9], self.overall),
        ]
    }

    /// Share of `overall` taken by a value; zero when `overall` is zero.
    pub fn proportion(&self, value: f64) -> f64 {
        if self.overall == 0.0 {
            0.0
        } else {
            value / self.overall
        }
    }

    pub fn pipeline_phase(&self) -> f64 {
        let slots = (self.micro_batches + self.stages).saturating_sub(1) as f64;
        slots * (self.stage_fwd_max + self.stage_bwd_max)
    }

    /// The three disjoint phases of the update (pipeline compute, first-stage
    /// gradient sync, optimizer update) as shares of `overall`.
    pub fn phase_proportions(&self) -> [(&'static str, f64); 3] {
        [
            ("pipeline", self.proportion(self.pipeline_phase())),
            ("first_stage_sync", self.proportion(self.dp_allreduce_first_stage)),
            ("update", self.proportion(self.max_update)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub breakdown: TimelineBreakdown,
    pub detail: StageDetail,
}

impl BatchPrediction {
    pub fn warnings(&self) -> &[String] {
        &self.detail.warnings
    }
}

/// Predicted time of one parameter update.
pub fn predict_batch_time<S: LatencySource>(
    model: &ModelConfig,
    layout: &ParallelLayout,
    cluster: &ClusterSpec,
    source: &S,
) -> Result<BatchPrediction, PredictError> {
    let mut detail = stage_times(model, layout, cluster, source)?;
    let times = &detail.times;
    let m = model.micro_batches_per_update;
    let s = layout.pp;
    let mut acc = Accumulator {
        source,
        warnings: Vec::new(),
    };
    let enc_fwd = acc.sum(&encoder_block(model, layout, cluster, Direction::Fwd)?)? * US;
    let enc_bwd = acc.sum(&encoder_block(model, layout, cluster, Direction::Bwd)?)? * US;
    let mp_allreduce = if layout.mp > 1 {
        let v = workload_vector(OperatorKind::MpAllReduce, Direction::Na, model, layout, cluster, None)?;
        acc.one(&v)? * US
    } else {
        0.0
    };
    let pp_p2p = if layout.pp > 1 {
        let v = workload_vector(OperatorKind::PpP2p, Direction::Na, model, layout, cluster, None)?;
        acc.one(&v)? * US
    } else {
        0.0
    };
    for w in acc.warnings {
        if !detail.warnings.contains(&w) {
            detail.warnings.push(w);
        }
    }

    let max_update = times.max_update();
    let slowest_update = times.update.iter().position(|&u| u == max_update).unwrap_or(0);
    let stage_fwd_max = times.max_fwd();
    let stage_bwd_max = times.max_bwd();
    let first_sync = times.first_stage_dp_allreduce();
    let breakdown = TimelineBreakdown {
        encoder_fwd: enc_fwd,
        encoder_bwd: enc_bwd,
        stage_fwd_max,
        stage_bwd_max,
        dp_allreduce_first_stage: first_sync,
        dp_allgather_max_update: detail.dp_allgather[slowest_update],
        max_update,
        mp_allreduce,
        pp_p2p,
        overall: closed_form_runtime(m, s, stage_fwd_max, stage_bwd_max, first_sync, max_update),
        stages: s,
        micro_batches: m,
    };
    Ok(BatchPrediction { breakdown, detail })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub layout: ParallelLayout,
    pub cluster: String,
    pub outcome: Result<BatchPrediction, (String, String)>,
}

impl SweepRow {
    pub fn overall(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|p| p.breakdown.overall)
    }

    pub fn status(&self) -> String {
        match &self.outcome {
            Ok(_) => "ok".into(),
            Err((kind, msg)) => format!("{kind}: {msg}"),
        }
    }
}

/// Evaluates every (model, layout, cluster) combination. Feasible rows come
/// first in ascending overall time, ties and failures keep input order.
pub fn sweep<S: LatencySource>(
    models: &[ModelConfig],
    layouts: &[ParallelLayout],
    clusters: &[ClusterSpec],
    source: &S,
) -> Vec<SweepRow> {
    let mut combos = Vec::new();
    for m in models {
        for c in clusters {
            for l in layouts {
                combos.push((m, *l, c));
            }
        }
    }
    let mut rows: Vec<SweepRow> = combos
        .par_iter()
        .map(|&(m, l, c)| SweepRow {
            model: m.name.clone(),
            layout: l,
            cluster: c.hardware_id.clone(),
            outcome: predict_batch_time(m, &l, c, source).map_err(|e| (e.kind().to_string(), e.to_string())),
        })
        .collect();
    rows.sort_by(|a, b| match (a.overall(), b.overall()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    rows
}

pub fn csv_header() -> String {
    let mut h = String::from("model,layout,cluster");
    for c in COMPONENTS {
        let _ = write!(h, ",{c}_s");
    }
    h.push_str(",status,warnings");
    h
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Machine-readable rows at full precision.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", csv_field(&r.model), r.layout, csv_field(&r.cluster));
        match &r.outcome {
            Ok(p) => {
                for (_, v) in p.breakdown.components() {
                    let _ = write!(out, ",{v}");
                }
                let _ = writeln!(out, ",ok,{}", csv_field(&p.warnings().join("; ")));
            }
            Err(_) => {
                out.push_str(&",".repeat(COMPONENTS.len()));
                let _ = writeln!(out, ",{},", csv_field(&r.status()));
            }
        }
    }
    out
}

/// Aligned table at six significant digits.
pub fn rows_to_text(rows: &[SweepRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![{
        let mut h = vec!["rank".to_string(), "model".into(), "layout".into(), "cluster".into()];
        h.extend(COMPONENTS.iter().map(|c| format!("{c}_s")));
        h.push("status".into());
        h
    }];
    for (i, r) in rows.iter().enumerate() {
        let mut line = vec![(i + 1).to_string(), r.model.clone(), r.layout.to_string(), r.cluster.clone()];
        match &r.outcome {
            Ok(p) => {
                line.extend(p.breakdown.components().iter().map(|&(_, v)| sig6(v)));
                let status = if p.warnings().is_empty() {
                    "ok".to_string()
                } else {
                    format!("ok ({} extrapolation warnings)", p.warnings().len())
                };
                line.push(status);
            }
            Err(_) => {
                line.extend(COMPONENTS.iter().map(|_| "-".to_string()));
                line.push(r.status());
            }
        }
        table.push(line);
    }
    crate::report::align(&table)
}

/// Per-component seconds and share of the overall time.
pub fn breakdown_to_text(p: &BatchPrediction) -> String {
    let b = &p.breakdown;
    let mut table = vec![vec!["component".to_string(), "seconds".into(), "proportion".into()]];
    for (name, v) in b.components() {
        table.push(vec![name.to_string(), sig6(v), sig6(b.proportion(v))]);
    }
    let mut out = crate::report::align(&table);
    out.push('\n');
    let mut phases = vec![vec!["phase".to_string(), "proportion".into()]];
    for (name, v) in b.phase_proportions() {
        phases.push(vec![name.to_string(), sig6(v)]);
    }
    out.push_str(&crate::report::align(&phases));
    for w in p.warnings() {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

/// `kind,name,seconds,proportion` rows for plotting.
pub fn proportions_csv(b: &TimelineBreakdown) -> String {
    let mut out = String::from("kind,name,seconds,proportion\n");
    for (name, v) in b.components() {
        let _ = writeln!(out, "component,{name},{v},{}", b.proportion(v));
    }
    let secs = [b.pipeline_phase(), b.dp_allreduce_first_stage, b.max_update];
    for ((name, p), v) in b.phase_proportions().into_iter().zip(secs) {
        let _ = writeln!(out, "phase,{name},{v},{p}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::StageRole;

    fn gpt() -> (ModelConfig, ParallelLayout, ClusterSpec) {
        (ModelConfig::gpt_20b(), ParallelLayout::new(4, 4, 8), ClusterSpec::perlmutter())
    }

    #[test]
    fn constant_bank_counts_inventory() {
        let (m, l, c) = gpt();
        let bank = RegressorBank::constant(1.0);
        let detail = stage_times(&m, &l, &c, &bank).unwrap();
        let inv = stage_inventory(&m, &l, &c, 0).unwrap();
        assert_eq!(detail.times.fwd[0], inv.op_count(Direction::Fwd) as f64 * 1e-6);
        assert_eq!(detail.times.stages(), 4);
        // optimizer + all-gather, and one all-reduce
        assert_eq!(detail.times.update[0], 2e-6);
        assert_eq!(detail.times.dp_allreduce[0], 1e-6);
    }

    #[test]
    fn single_stage_has_no_p2p() {
        let m = ModelConfig {
            num_encoders: 4,
            ..ModelConfig::gpt_20b()
        };
        let l = ParallelLayout::new(1, 4, 1);
        let c = ClusterSpec::new(1, 4, "node");
        let p = predict_batch_time(&m, &l, &c, &RegressorBank::constant(1.0)).unwrap();
        assert_eq!(p.detail.times.stages(), 1);
        assert_eq!(p.breakdown.pp_p2p, 0.0);
        // dp = 1: no data-parallel collectives
        assert_eq!(p.breakdown.dp_allreduce_first_stage, 0.0);
        assert_eq!(p.breakdown.max_update, 1e-6);
    }

    #[test]
    fn loss_and_optimizer_allreduces_are_not_charged() {
        let (m, l, c) = gpt();
        let inv = stage_inventory(&m, &l, &c, 3).unwrap();
        assert_eq!(inv.role, StageRole::Last);
        assert_eq!(
            inv.count_of(OperatorKind::MpAllReduce, Direction::Na),
            inv.encoders * m.encoder_fwd_syncs as u64
        );
        let mut bank = RegressorBank::constant(1.0);
        bank.insert(TrainedRegressor::constant(OperatorKind::MpAllReduce, Direction::Na, 5.0));
        let d1 = stage_times(&m, &l, &c, &RegressorBank::constant(1.0)).unwrap();
        let d5 = stage_times(&m, &l, &c, &bank).unwrap();
        let extra = 4.0 * (inv.encoders * m.encoder_fwd_syncs as u64) as f64 * 1e-6;
        assert!((d5.times.fwd[3] - d1.times.fwd[3] - extra).abs() < 1e-15);
        assert_eq!(d5.times.update, d1.times.update);
    }

    #[test]
    fn missing_regressor_is_named() {
        let m = ModelConfig::llemma_7b();
        let l = ParallelLayout::new(4, 4, 8);
        let c = ClusterSpec::perlmutter();
        let mut bank = RegressorBank::constant(1.0);
        bank.models.remove(&(OperatorKind::FlashAttention, Direction::Fwd));
        let err = predict_batch_time(&m, &l, &c, &bank).unwrap_err();
        assert!(err.to_string().contains("FlashAttention/fwd"), "{err}");
        bank.models.remove(&(OperatorKind::Glue, Direction::Fwd));
        bank.models.remove(&(OperatorKind::Glue, Direction::Bwd));
        bank.insert(TrainedRegressor::constant(OperatorKind::FlashAttention, Direction::Fwd, 1.0));
        assert!(predict_batch_time(&m, &l, &c, &bank).is_ok());
    }

    #[test]
    fn zero_bank_is_zero_everywhere() {
        let (m, l, c) = gpt();
        let p = predict_batch_time(&m, &l, &c, &RegressorBank::constant(0.0)).unwrap();
        assert_eq!(p.breakdown.overall, 0.0);
        for (_, v) in p.breakdown.components() {
            assert_eq!(p.breakdown.proportion(v), 0.0);
        }
    }

    #[test]
    fn breakdown_identity_and_phases() {
        let (m, l, c) = gpt();
        let p = predict_batch_time(&m, &l, &c, &RegressorBank::constant(1.0)).unwrap();
        let b = p.breakdown;
        assert_eq!(
            b.overall,
            19.0 * (b.stage_fwd_max + b.stage_bwd_max) + b.dp_allreduce_first_stage + b.max_update
        );
        let sum: f64 = b.phase_proportions().iter().map(|(_, v)| v).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_orders_and_isolates_errors() {
        let m = ModelConfig::gpt_20b();
        let c = ClusterSpec::perlmutter();
        let layouts = [
            ParallelLayout::new(4, 4, 8),
            ParallelLayout::new(4, 8, 4),
            ParallelLayout::new(8, 4, 4),
            ParallelLayout::new(1, 128, 1),
        ];
        let bank = RegressorBank::constant(1.0);
        let rows = sweep(std::slice::from_ref(&m), &layouts, std::slice::from_ref(&c), &bank);
        assert_eq!(rows.len(), 4);
        assert!(rows[..3].iter().all(|r| r.outcome.is_ok()));
        assert!(rows[3].status().starts_with("InfeasiblePartition"), "{}", rows[3].status());
        for w in rows[..3].windows(2) {
            assert!(w[0].overall() <= w[1].overall());
        }
        assert_eq!(rows, sweep(&[m], &layouts, &[c], &bank));
        let csv = rows_to_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(rows_to_text(&rows).contains("InfeasiblePartition"));
    }

    #[test]
    fn single_sweep_row_equals_prediction() {
        let (m, l, c) = gpt();
        let bank = RegressorBank::constant(2.0);
        let rows = sweep(std::slice::from_ref(&m), &[l], std::slice::from_ref(&c), &bank);
        let direct = predict_batch_time(&m, &l, &c, &bank).unwrap();
        assert_eq!(rows[0].outcome.as_ref().unwrap(), &direct);
    }

    #[test]
    fn bank_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let bank = RegressorBank::constant(3.5);
        bank.save(dir.path()).unwrap();
        let back = RegressorBank::load(dir.path()).unwrap();
        assert_eq!(back.hardware_id, "constant");
        assert_eq!(back, bank);
    }
}
