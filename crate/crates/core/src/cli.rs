//! The `perfmodel` command-line tool.
//!
//! Every subcommand writes its outputs and a `manifest.toml` into `--out`.
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or usage error,
//! 3 data error, 4 incomplete regressor bank.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchkit::{ingest_csv, synth_dataset, write_csv, BenchError, DatasetPlan, SynthHardwareModel};
use crate::config::{load, ConfigError, PredictConfig, Source, SweepConfig, TimelineConfig, TrainConfig};
use crate::predict::{
    breakdown_to_text, predict_batch_time, proportions_csv, rows_to_csv, rows_to_text, sweep,
    LatencySource, OracleSource, PredictError, RegressorBank, BANK_INDEX,
};
use crate::regress::{fit_records, RegressError};
use crate::report::{align, sig6, write_atomic};
use crate::timeline::{compare_formula_vs_sim, simulate_1f1b, StageTimes};
use crate::workload::ParallelLayout;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("incomplete regressor bank: {0}")]
    IncompleteBank(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::IncompleteBank(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn bench_err(path: &Path, e: BenchError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    match e {
        BenchError::Grid { .. } | BenchError::Hardware(_) => CliError::Config(msg),
        BenchError::Io(_) => CliError::Io(msg),
        _ => CliError::Data(msg),
    }
}

fn predict_err(e: PredictError) -> CliError {
    match e {
        PredictError::MissingRegressor { .. } => CliError::IncompleteBank(e.to_string()),
        PredictError::Infeasible(_) | PredictError::Config(_) => CliError::Config(e.to_string()),
        PredictError::Regress(_) | PredictError::Bank(_) => CliError::Data(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "perfmodel", version, about = "Operator-level training-time prediction for 3D-parallel transformer training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed for every random choice made by the run.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Directory receiving all outputs and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress the report on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark CSV from the analytical hardware model.
    Genbench {
        /// Dataset plan (sampling grids and operators); defaults to the full grids.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Synthetic hardware model.
        #[arg(long)]
        hw: PathBuf,
        /// Measurements per workload vector.
        #[arg(long, default_value_t = 1)]
        replicates: u32,
        /// Overrides the plan's subsampling stride.
        #[arg(long)]
        stride: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one regressor per (operator, direction) in a benchmark CSV.
    Train {
        /// Benchmark CSV.
        #[arg(long)]
        data: PathBuf,
        /// Candidate grid and aggregation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the per-update runtime breakdown of one configuration.
    Predict {
        /// Model, cluster and (optionally) layout.
        #[arg(long)]
        config: PathBuf,
        /// Parallel layout `pp-mp-dp`; overrides the config.
        #[arg(long)]
        layout: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
        /// Also simulate the 1F1B schedule on the same stage times.
        #[arg(long)]
        validate: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Rank every combination of models, layouts and clusters.
    Sweep {
        /// Lists of models, layouts and clusters.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the closed-form runtime against the schedule simulator.
    ValidateTimeline {
        /// Grid bounds and stage times; defaults cover M 1..32 and S 1..8.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args, Clone)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Use exact synthetic-model latencies instead of a bank.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

/// What a run read and wrote. Identical manifests imply identical outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    subcommand: String,
    tool_version: String,
    seed: u64,
    out: String,
    configs: Vec<String>,
    options: Vec<(String, String)>,
    inputs: Vec<InputDigest>,
}

impl RunManifest {
    fn new(subcommand: &str, common: &Common) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: common.seed,
            out: common.out.display().to_string(),
            configs: Vec::new(),
            options: Vec::new(),
            inputs: Vec::new(),
        }
    }

    fn config(&mut self, path: &Path) -> Result<(), CliError> {
        self.configs.push(path.display().to_string());
        self.input(path)
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn option(&mut self, key: &str, value: impl ToString) {
        self.options.push((key.into(), value.to_string()));
    }

    fn write(&self, out: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Io(e.to_string()))?;
        let path = out.join(MANIFEST);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }
}

struct Output<'a> {
    common: &'a Common,
}

impl Output<'_> {
    fn prepare(common: &Common) -> Result<Output<'_>, CliError> {
        fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
        Ok(Output { common })
    }

    fn file(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.common.out.join(name);
        write_atomic(&path, contents.as_bytes()).map_err(io_err(&path))
    }

    fn say(&self, text: &str) {
        if !self.common.quiet {
            print!("{text}");
        }
    }
}

/// Parses `args` and runs the chosen subcommand.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Genbench {
            plan,
            hw,
            replicates,
            stride,
            common,
        } => genbench(plan.as_deref(), &hw, replicates, stride, &common),
        Command::Train { data, config, common } => train(&data, config.as_deref(), &common),
        Command::Predict {
            config,
            layout,
            source,
            validate,
            common,
        } => predict(&config, layout.as_deref(), &source, validate, &common),
        Command::Sweep { config, source, common } => sweep_cmd(&config, &source, &common),
        Command::ValidateTimeline { config, common } => validate_timeline(config.as_deref(), &common),
    }
}

fn genbench(
    plan_path: Option<&Path>,
    hw_path: &Path,
    replicates: u32,
    stride: Option<usize>,
    common: &Common,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("genbench", common);
    let mut plan = match plan_path {
        Some(p) => {
            manifest.config(p)?;
            load::<DatasetPlan>(p)?
        }
        None => DatasetPlan::default(),
    };
    manifest.config(hw_path)?;
    let hw: SynthHardwareModel = load(hw_path)?;
    if let Some(s) = stride {
        plan.stride = s;
    }
    if replicates == 0 {
        return Err(CliError::Config("--replicates must be at least 1".into()));
    }
    manifest.option("replicates", replicates);
    manifest.option("stride", plan.stride);

    let records = synth_dataset(&plan, &hw, common.seed, replicates).map_err(|e| bench_err(hw_path, e))?;
    let out = Output::prepare(common)?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &records).map_err(|e| bench_err(&common.out, e))?;
    let path = common.out.join("bench.csv");
    write_atomic(&path, &csv).map_err(io_err(&path))?;

    let mut counts: Vec<(String, usize)> = Vec::new();
    for r in &records {
        let key = format!("{}/{}", r.vector.op, r.vector.direction);
        match counts.last_mut() {
            Some((k, n)) if *k == key => *n += 1,
            _ => counts.push((key, 1)),
        }
    }
    let mut table = vec![vec!["op/direction".to_string(), "rows".into()]];
    table.extend(counts.into_iter().map(|(k, n)| vec![k, n.to_string()]));
    table.push(vec!["total".into(), records.len().to_string()]);
    let report = align(&table);
    out.file("genbench.txt", &report)?;
    manifest.write(&common.out)?;
    out.say(&report);
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("train", common);
    let cfg = match config {
        Some(p) => {
            manifest.config(p)?;
            load::<TrainConfig>(p)?
        }
        None => TrainConfig::default(),
    };
    manifest.input(data)?;
    let records = ingest_csv(data).map_err(|e| bench_err(data, e))?;
    let ids: BTreeSet<&str> = records.iter().map(|r| r.hardware_id.as_str()).collect();
    if ids.len() > 1 {
        return Err(CliError::Data(format!(
            "{}: records from several hardware ids: {}",
            data.display(),
            ids.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let hardware_id = ids.into_iter().next().unwrap_or("unknown").to_string();
    let candidates = cfg.candidates();
    let fitted = fit_records(&records, &candidates, cfg.aggregate, cfg.log_target, common.seed).map_err(|e| match e {
        RegressError::NoCandidates => CliError::Config(e.to_string()),
        _ => CliError::Data(format!("{}: {e}", data.display())),
    })?;
    if fitted.is_empty() {
        return Err(CliError::Data(format!("{}: no records", data.display())));
    }

    let out = Output::prepare(common)?;
    let mut bank = RegressorBank::new(hardware_id);
    let mut summary = vec![vec![
        "op/direction".to_string(),
        "selected".into(),
        "val_mape_%".into(),
        "samples".into(),
    ]];
    let mut detail = String::new();
    for (model, report) in fitted {
        let best = report.selected_score();
        summary.push(vec![
            format!("{}/{}", report.op, report.direction),
            best.candidate.describe(),
            sig6(best.val_mape),
            report.n_refit.to_string(),
        ]);
        detail.push('\n');
        detail.push_str(&report.to_table());
        bank.insert(model);
    }
    bank.save(&common.out).map_err(io_err(&common.out))?;
    let mut text = align(&summary);
    text.push_str(&detail);
    out.file("fit_report.txt", &text)?;
    manifest.write(&common.out)?;
    out.say(&align(&summary));
    Ok(())
}

enum Latencies {
    Bank(RegressorBank),
    Oracle(OracleSource),
}

impl LatencySource for Latencies {
    fn latency(&self, vec: &crate::workload::WorkloadVector) -> Result<crate::predict::OpLatency, PredictError> {
        match self {
            Latencies::Bank(b) => b.latency(vec),
            Latencies::Oracle(o) => o.latency(vec),
        }
    }
}

fn open_source(args: &SourceArgs, manifest: &mut RunManifest) -> Result<Latencies, CliError> {
    if let Some(hw) = &args.oracle {
        manifest.config(hw)?;
        return Ok(Latencies::Oracle(OracleSource::new(&load(hw)?)));
    }
    let dir = args.bank.as_ref().expect("clap requires a source");
    let bank = RegressorBank::load(dir).map_err(|e| match e {
        PredictError::Bank(m) => CliError::Data(m),
        other => predict_err(other),
    })?;
    manifest.input(&dir.join(BANK_INDEX))?;
    for &(op, dir_) in bank.models.keys() {
        manifest.input(&dir.join(crate::predict::model_file_name(op, dir_)))?;
    }
    Ok(Latencies::Bank(bank))
}

fn predict(
    config: &Path,
    layout: Option<&str>,
    source: &SourceArgs,
    validate: bool,
    common: &Common,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("predict", common);
    manifest.config(config)?;
    let src = Source::read(config)?;
    let cfg = PredictConfig::from_source(&src)?;
    let layout: ParallelLayout = match layout {
        Some(l) => {
            manifest.option("layout", l);
            l.parse().map_err(|e| CliError::Config(format!("--layout: {e}")))?
        }
        None => cfg
            .layout
            .ok_or_else(|| CliError::Config(format!("{}: no layout given", config.display())))?,
    };
    manifest.option("validate", validate);
    let latencies = open_source(source, &mut manifest)?;
    let prediction = predict_batch_time(&cfg.model, &layout, &cfg.cluster, &latencies).map_err(predict_err)?;

    let out = Output::prepare(common)?;
    let mut report = format!(
        "model {}  layout {}  cluster {} ({}x{})\n\n",
        cfg.model.name, layout, cfg.cluster.hardware_id, cfg.cluster.nodes, cfg.cluster.gpus_per_node
    );
    report.push_str(&breakdown_to_text(&prediction));
    out.file("breakdown.csv", &proportions_csv(&prediction.breakdown))?;
    out.file("stage_times.csv", &stage_times_csv(&prediction.detail.times))?;
    if validate {
        let m = cfg.model.micro_batches_per_update as usize;
        let trace = simulate_1f1b(&prediction.detail.times, m).map_err(|e| CliError::Data(e.to_string()))?;
        let formula = prediction.breakdown.overall;
        let gap = (formula - trace.total) / trace.total;
        let _ = write!(
            report,
            "\nformula {} s  simulated {} s  gap {}%\n",
            sig6(formula),
            sig6(trace.total),
            sig6(100.0 * gap)
        );
        out.file("schedule.csv", &trace.to_csv())?;
    }
    out.file("report.txt", &report)?;
    manifest.write(&common.out)?;
    out.say(&report);
    Ok(())
}

fn stage_times_csv(t: &StageTimes) -> String {
    let mut out = String::from("stage,fwd_s,bwd_s,dp_allreduce_s,update_s\n");
    for s in 0..t.stages() {
        let _ = writeln!(out, "{s},{},{},{},{}", t.fwd[s], t.bwd[s], t.dp_allreduce[s], t.update[s]);
    }
    out
}

fn sweep_cmd(config: &Path, source: &SourceArgs, common: &Common) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("sweep", common);
    manifest.config(config)?;
    let cfg = SweepConfig::from_source(&Source::read(config)?)?;
    if cfg.is_empty() {
        return Err(CliError::Config(format!(
            "{}: sweep needs at least one model, layout and cluster",
            config.display()
        )));
    }
    let latencies = open_source(source, &mut manifest)?;
    let rows = sweep(&cfg.models, &cfg.layouts, &cfg.clusters, &latencies);
    if let Some(missing) = rows.iter().find_map(|r| match &r.outcome {
        Err((kind, msg)) if kind == "MissingRegressor" => Some(msg.clone()),
        _ => None,
    }) {
        return Err(CliError::IncompleteBank(missing));
    }
    let out = Output::prepare(common)?;
    let text = rows_to_text(&rows);
    out.file("sweep.csv", &rows_to_csv(&rows))?;
    out.file("sweep.txt", &text)?;
    manifest.write(&common.out)?;
    out.say(&text);
    Ok(())
}

fn validate_timeline(config: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("validate-timeline", common);
    let cfg = match config {
        Some(p) => {
            manifest.config(p)?;
            load::<TimelineConfig>(p)?
        }
        None => TimelineConfig::default(),
    };
    let mut csv = String::from("case,stages,micro_batches,formula_s,simulated_s,gap\n");
    let mut worst_homogeneous = 0.0f64;
    let mut cases = 0usize;
    for s in 1..=cfg.max_stages {
        for m in 1..=cfg.max_micro_batches {
            let t = StageTimes::homogeneous(s, cfg.fwd, cfg.bwd, cfg.sync, cfg.update);
            let c = compare_formula_vs_sim(&t, m).map_err(|e| CliError::Config(e.to_string()))?;
            worst_homogeneous = worst_homogeneous.max(c.gap.abs());
            cases += 1;
            let _ = writeln!(csv, "homogeneous,{s},{m},{},{},{}", c.formula, c.sim, c.gap);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let mut gaps = Vec::with_capacity(cfg.heterogeneous_trials);
    for _ in 0..cfg.heterogeneous_trials {
        let s = rng.random_range(1..=cfg.max_stages.max(1));
        let m = rng.random_range(1..=cfg.max_micro_batches.max(1));
        let mut draw = |base: f64| -> Vec<f64> { (0..s).map(|_| base * rng.random_range(0.5..1.5)).collect() };
        let t = StageTimes {
            fwd: draw(cfg.fwd),
            bwd: draw(cfg.bwd),
            update: draw(cfg.update),
            dp_allreduce: draw(cfg.sync),
        };
        let c = compare_formula_vs_sim(&t, m).map_err(|e| CliError::Config(e.to_string()))?;
        gaps.push(c.gap);
        let _ = writeln!(csv, "heterogeneous,{s},{m},{},{},{}", c.formula, c.sim, c.gap);
    }

    let out = Output::prepare(common)?;
    let mut table = vec![vec!["cases".to_string(), "count".into(), "max |gap|".into(), "mean gap".into()]];
    table.push(vec![
        "homogeneous".into(),
        cases.to_string(),
        sig6(worst_homogeneous),
        "-".into(),
    ]);
    if !gaps.is_empty() {
        let max = gaps.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        table.push(vec!["heterogeneous".into(), gaps.len().to_string(), sig6(max), sig6(mean)]);
    }
    let text = align(&table);
    out.file("timeline.csv", &csv)?;
    out.file("timeline.txt", &text)?;
    manifest.write(&common.out)?;
    out.say(&text);
    if worst_homogeneous != 0.0 {
        return Err(CliError::Data(format!(
            "closed form and simulation disagree on homogeneous stages (max gap {})",
            sig6(worst_homogeneous)
        )));
    }
    Ok(())
}
