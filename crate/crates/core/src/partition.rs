//! Pipeline stage partitioning and per-stage parameter accounting.
//!
//! The embedding block and a reshape block sit ahead of the first encoder,
//! and three blocks (reshape, final norm, output projection) follow the last
//! one. Encoder allocation treats those five blocks as extra layers so the
//! first and last stages get fewer encoders.

use std::fmt;

use thiserror::Error;

use crate::workload::{align_vocab, ModelConfig, ParallelLayout};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot place {num_encoders} encoders on {pp} pipeline stages (stage {stage} would get {count})")]
    InfeasiblePartition {
        num_encoders: u64,
        pp: u64,
        stage: usize,
        count: i64,
    },
    #[error("partition needs pp >= 1 and at least one encoder")]
    EmptyInput,
    #[error("non-integral parameter count: {0}")]
    NonIntegral(String),
    #[error("stage {stage} out of range for {stages} stages")]
    StageOutOfRange { stage: usize, stages: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageRole {
    First,
    Middle,
    Last,
    Solo,
}

impl fmt::Display for StageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageRole::First => "first",
            StageRole::Middle => "middle",
            StageRole::Last => "last",
            StageRole::Solo => "solo",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    pub encoders_per_stage: Vec<u64>,
    pub roles: Vec<StageRole>,
}

impl StagePartition {
    pub fn stages(&self) -> usize {
        self.encoders_per_stage.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageParamCount {
    pub stage_index: usize,
    pub param_count: u64,
}

/// Allocates encoders to pipeline stages.
///
/// With `q = (n + 5) / pp`, the first stage gets `ceil(q) - 2`, each middle
/// stage `floor(q)` and the last stage `floor(q) - 3`. Those counts only add up
/// to `n` when `(n + 5) mod pp` is 0 or 1; any remainder left over is handed
/// out one encoder at a time to the earliest middle stages. There are always
/// enough middle stages for this because the remainder is at most `pp - 2`.
pub fn partition_encoders(num_encoders: u64, pp: u64) -> Result<StagePartition, PartitionError> {
    if pp == 0 || num_encoders == 0 {
        return Err(PartitionError::EmptyInput);
    }
    if pp == 1 {
        return Ok(StagePartition {
            encoders_per_stage: vec![num_encoders],
            roles: vec![StageRole::Solo],
        });
    }
    let layers = (num_encoders + 5) as i64;
    let stages = pp as i64;
    let floor = layers / stages;
    let ceil = (layers + stages - 1) / stages;

    let mut counts: Vec<i64> = Vec::with_capacity(pp as usize);
    counts.push(ceil - 2);
    counts.extend(std::iter::repeat_n(floor, pp as usize - 2));
    counts.push(floor - 3);

    let mut leftover = num_encoders as i64 - counts.iter().sum::<i64>();
    for count in counts.iter_mut().skip(1).take(pp as usize - 2) {
        if leftover <= 0 {
            break;
        }
        *count += 1;
        leftover -= 1;
    }
    debug_assert_eq!(leftover, 0);

    if let Some((stage, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 0) {
        return Err(PartitionError::InfeasiblePartition {
            num_encoders,
            pp,
            stage,
            count,
        });
    }

    let mut roles = vec![StageRole::Middle; pp as usize];
    roles[0] = StageRole::First;
    roles[pp as usize - 1] = StageRole::Last;
    Ok(StagePartition {
        encoders_per_stage: counts.into_iter().map(|c| c as u64).collect(),
        roles,
    })
}

fn exact_div(num: u64, den: u64, what: &str) -> Result<u64, PartitionError> {
    if den == 0 || !num.is_multiple_of(den) {
        return Err(PartitionError::NonIntegral(format!("{what}: {num} / {den}")));
    }
    Ok(num / den)
}

/// Parameters of one encoder shard: `4d + 8d(d+1)/mp + d(4d+1)/mp`.
pub fn encoder_param_count(d: u64, mp: u64) -> Result<u64, PartitionError> {
    if d == 0 || mp == 0 {
        return Err(PartitionError::NonIntegral("d and mp must be positive".into()));
    }
    let attention = exact_div(8 * d * (d + 1), mp, "8d(d+1)/mp")?;
    let mlp = exact_div(d * (4 * d + 1), mp, "d(4d+1)/mp")?;
    Ok(4 * d + attention + mlp)
}

/// Parameters held by one model-parallel shard of a pipeline stage.
pub fn stage_param_count(
    partition: &StagePartition,
    model: &ModelConfig,
    layout: &ParallelLayout,
    stage_index: usize,
) -> Result<StageParamCount, PartitionError> {
    if stage_index >= partition.stages() {
        return Err(PartitionError::StageOutOfRange {
            stage: stage_index,
            stages: partition.stages(),
        });
    }
    let d = model.hidden_dim;
    let v = align_vocab(model.vocab_size_raw, layout.mp);
    let per_encoder = encoder_param_count(d, layout.mp)?;
    let vocab_shard = exact_div(v * d, layout.mp, "v*d/mp")?;
    let encoders = partition.encoders_per_stage[stage_index] * per_encoder;
    let param_count = match partition.roles[stage_index] {
        StageRole::First => vocab_shard + encoders,
        StageRole::Middle => encoders,
        StageRole::Last => encoders + 2 * d + vocab_shard,
        StageRole::Solo => vocab_shard + encoders + 2 * d + vocab_shard,
    };
    Ok(StageParamCount {
        stage_index,
        param_count,
    })
}
