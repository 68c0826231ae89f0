//! Benchmark data: sampling grids, the CSV record format, replicate
//! aggregation and a synthetic hardware model used as ground truth when no
//! real profiling data is available.

mod dataset;
mod grid;
mod oracle;
mod records;

pub use dataset::{synth_dataset, DatasetPlan};
pub use grid::{
    default_comm_grid, default_compute_grid, default_optimizer_grid, gen_comm_grid,
    gen_compute_grid, CommPoint, ComputePoint, GridAxis, GridSpec, Step,
};
pub use oracle::{op_cost, synth_latency, OpCost, SynthHardwareModel, ELEM_BYTES};
pub use records::{
    aggregate, aggregate_records, ingest_csv, read_csv, write_csv, Aggregate, AggregatedSample,
    BenchRecord, CSV_HEADER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("grid axis `{axis}`: {reason}")]
    Grid { axis: String, reason: String },
    #[error("bad CSV header: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("line {line}: duplicate of record on line {first_line}")]
    Duplicate { line: u64, first_line: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid hardware model: {0}")]
    Hardware(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Mixes a list of words into a 64-bit seed (splitmix64 finaliser).
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        state ^= w;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}
