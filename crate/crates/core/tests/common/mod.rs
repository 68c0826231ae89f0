#![allow(dead_code)]

use perfmodel::benchkit::{synth_dataset, DatasetPlan, GridAxis, GridSpec, Step, SynthHardwareModel};
use perfmodel::predict::RegressorBank;
use perfmodel::regress::{fit_records, Candidate, FitReport};
use perfmodel::benchkit::Aggregate;
use perfmodel::workload::{ClusterSpec, ModelConfig, OperatorKind, ParallelLayout};

/// GPT-20B with its width, depth and sequence shrunk to run on a laptop.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        name: "desk-gpt".into(),
        hidden_dim: 1024,
        seq_len: 512,
        attention_heads: 16,
        num_encoders: 20,
        ..ModelConfig::gpt_20b()
    }
}

pub fn desk_cluster() -> ClusterSpec {
    ClusterSpec::new(32, 4, "desk")
}

pub fn desk_layouts() -> Vec<ParallelLayout> {
    vec![
        ParallelLayout::new(4, 4, 8),
        ParallelLayout::new(4, 8, 4),
        ParallelLayout::new(8, 4, 4),
    ]
}

fn axis(name: &str, start: u64, step: Step, end: u64) -> GridAxis {
    GridAxis::new(name, start, step, end)
}

fn comm(start: u64, step: u64, end: u64, procs: (Step, u64)) -> GridSpec {
    GridSpec::new(vec![
        axis("entries", start, Step::Add(step), end),
        axis("processes", 2, procs.0, procs.1),
    ])
}

/// Sampling ranges bracketing the desk model on every layout.
pub fn desk_plan() -> DatasetPlan {
    use OperatorKind::*;
    let mut plan = DatasetPlan {
        hardware_id: "desk".into(),
        compute: GridSpec::new(vec![
            axis("mp", 1, Step::Mul(2), 8),
            axis("b", 2, Step::Mul(2), 8),
            axis("h", 8, Step::Add(8), 32),
            axis("l", 256, Step::Add(128), 1024),
            axis("d", 512, Step::Add(128), 1536),
        ]),
        optimizer: GridSpec::new(vec![
            axis("mp", 1, Step::Mul(2), 8),
            axis("d", 512, Step::Add(128), 2048),
            axis("encoders", 1, Step::Add(1), 10),
        ]),
        ..DatasetPlan::default()
    };
    plan.comm.insert(MpAllReduce, comm(524_288, 65_536, 8_388_608, (Step::Mul(2), 8)));
    plan.comm.insert(PpP2p, comm(131_072, 65_536, 4_194_304, (Step::Fixed, 2)));
    plan.comm.insert(DpAllReduce, comm(262_144, 262_144, 67_108_864, (Step::Mul(2), 8)));
    plan.comm.insert(DpAllGather, comm(262_144, 262_144, 67_108_864, (Step::Mul(2), 8)));
    plan
}

/// A small candidate grid that keeps desk-scale training fast.
pub fn quick_candidates() -> Vec<Candidate> {
    vec![Candidate::forest(50, 12), Candidate::gbt(300, 0.1, 6)]
}

pub fn train_bank(
    plan: &DatasetPlan,
    hw: &SynthHardwareModel,
    candidates: &[Candidate],
    seed: u64,
) -> (RegressorBank, Vec<FitReport>) {
    let records = synth_dataset(plan, hw, seed, 1).expect("dataset");
    let fitted = fit_records(&records, candidates, Aggregate::MedianMean5, true, seed).expect("fit");
    let mut bank = RegressorBank::new(plan.hardware_id.clone());
    let mut reports = Vec::new();
    for (model, report) in fitted {
        bank.insert(model);
        reports.push(report);
    }
    (bank, reports)
}

/// Per-tensor parameter shapes of one encoder block under tensor
/// parallelism, as listed operator by operator. Biases that follow a
/// row-parallel weight are replicated, not split.
pub fn encoder_tensor_shapes(d: u64, mp: u64) -> Vec<Vec<u64>> {
    vec![
        vec![d],
        vec![d],
        vec![d, 3 * d / mp],
        vec![3 * d / mp],
        vec![d / mp, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, 4 * d / mp],
        vec![4 * d / mp],
        vec![4 * d / mp, d],
        vec![d],
    ]
}

pub fn brute_force_encoder_params(d: u64, mp: u64) -> u64 {
    encoder_tensor_shapes(d, mp)
        .iter()
        .map(|s| s.iter().product::<u64>())
        .sum()
}

/// Indices of a seeded 20% sample of interior points: points whose every
/// feature with more than two distinct values lies strictly inside the
/// observed range.
pub fn interior_holdout(samples: &[perfmodel::regress::Sample], seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let k = samples.first().map_or(0, |s| s.feats.len());
    let ranges: Vec<Option<(f64, f64)>> = (0..k)
        .map(|f| {
            let mut v: Vec<f64> = samples.iter().map(|s| s.feats[f]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            (v.len() > 2).then(|| (v[0], v[v.len() - 1]))
        })
        .collect();
    let mut interior: Vec<usize> = (0..samples.len())
        .filter(|&i| {
            ranges.iter().enumerate().all(|(f, r)| match r {
                Some((lo, hi)) => samples[i].feats[f] > *lo && samples[i].feats[f] < *hi,
                None => true,
            })
        })
        .collect();
    interior.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n = (interior.len() as f64 * 0.2).round() as usize;
    interior.truncate(n);
    interior.sort_unstable();
    interior
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_perfmodel")
}

/// Runs the tool and returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(bin()).args(args).output().expect("run perfmodel");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}
