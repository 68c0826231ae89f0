use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::workload::{Direction, OperatorKind, WorkloadVector};

pub const CSV_HEADER: [&str; 9] = [
    "op",
    "direction",
    "feat0",
    "feat1",
    "feat2",
    "feat3",
    "latency_us",
    "hardware_id",
    "replicate",
];

/// One measured (or synthesised) operator latency.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub vector: WorkloadVector,
    pub latency_us: f64,
    pub hardware_id: String,
    pub replicate: u32,
}

impl BenchRecord {
    pub fn new(
        vector: WorkloadVector,
        latency_us: f64,
        hardware_id: impl Into<String>,
        replicate: u32,
    ) -> Result<Self, BenchError> {
        if !(latency_us > 0.0 && latency_us.is_finite()) {
            return Err(BenchError::InvalidRecord(format!(
                "latency_us must be positive and finite, got {latency_us}"
            )));
        }
        Ok(BenchRecord {
            vector,
            latency_us,
            hardware_id: hardware_id.into(),
            replicate,
        })
    }

    fn key(&self) -> (OperatorKind, Direction, Vec<u64>, u32) {
        (self.vector.op, self.vector.direction, self.vector.feats.clone(), self.replicate)
    }
}

/// Writes records in the benchmark CSV schema. Latencies are written in
/// shortest round-trip form, so reading them back is lossless.
pub fn write_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row: Vec<String> = vec![r.vector.op.name().into(), r.vector.direction.as_str().into()];
        for i in 0..4 {
            row.push(r.vector.feats.get(i).map(|f| f.to_string()).unwrap_or_default());
        }
        row.push(format!("{}", r.latency_us));
        row.push(r.hardware_id.clone());
        row.push(r.replicate.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<BenchRecord, BenchError> {
    let row_err = |message: String| BenchError::Row { line, message };
    if record.len() != CSV_HEADER.len() {
        return Err(row_err(format!(
            "expected {} columns, found {}",
            CSV_HEADER.len(),
            record.len()
        )));
    }
    let op = OperatorKind::from_str(record[0].trim()).map_err(row_err)?;
    let direction = Direction::from_str(record[1].trim()).map_err(row_err)?;
    let mut feats = Vec::with_capacity(4);
    let mut seen_empty = false;
    for (i, cell) in (2..6).map(|c| &record[c]).enumerate() {
        let cell = cell.trim();
        if cell.is_empty() {
            seen_empty = true;
            continue;
        }
        if seen_empty {
            return Err(row_err(format!("feat{i} is set after an empty feature column")));
        }
        feats.push(
            cell.parse::<u64>()
                .map_err(|_| row_err(format!("feat{i} `{cell}` is not a non-negative integer")))?,
        );
    }
    let vector = WorkloadVector::new(op, direction, feats).map_err(|e| row_err(e.to_string()))?;
    let latency_us: f64 = record[6]
        .trim()
        .parse()
        .map_err(|_| row_err(format!("latency_us `{}` is not a number", &record[6])))?;
    let replicate: u32 = record[8]
        .trim()
        .parse()
        .map_err(|_| row_err(format!("replicate `{}` is not a non-negative integer", &record[8])))?;
    BenchRecord::new(vector, latency_us, record[7].trim(), replicate)
        .map_err(|e| row_err(e.to_string()))
}

/// Parses and validates a benchmark CSV from any reader.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != CSV_HEADER {
        return Err(BenchError::Schema {
            expected: CSV_HEADER.join(","),
            found: found.join(","),
        });
    }
    let mut out = Vec::new();
    let mut seen: HashMap<(OperatorKind, Direction, Vec<u64>, u32), u64> = HashMap::new();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parsed = parse_row(&record, line)?;
        if let Some(&first_line) = seen.get(&parsed.key()) {
            return Err(BenchError::Duplicate { line, first_line });
        }
        seen.insert(parsed.key(), line);
        out.push(parsed);
    }
    Ok(out)
}

pub fn ingest_csv(path: &Path) -> Result<Vec<BenchRecord>, BenchError> {
    read_csv(File::open(path)?)
}

/// How repeated measurements of one configuration collapse into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// Sort, keep the middle five and average them; plain median below five.
    #[default]
    #[serde(rename = "mediandmean5")]
    MedianMean5,
    Median,
    Min,
}

impl FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mediandmean5" => Ok(Aggregate::MedianMean5),
            "median" => Ok(Aggregate::Median),
            "min" => Ok(Aggregate::Min),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Collapses replicate measurements. Returns NaN for an empty slice.
pub fn aggregate(samples: &[f64], how: Aggregate) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    match how {
        Aggregate::Min => sorted[0],
        Aggregate::Median => median(&sorted),
        Aggregate::MedianMean5 if sorted.len() < 5 => median(&sorted),
        Aggregate::MedianMean5 => {
            let start = (sorted.len() - 5) / 2;
            sorted[start..start + 5].iter().sum::<f64>() / 5.0
        }
    }
}

/// One training sample: a workload vector and its aggregated latency.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSample {
    pub feats: Vec<u64>,
    pub latency_us: f64,
    pub replicates: usize,
}

/// Groups records by (operator, direction) and aggregates replicates of
/// identical feature vectors. Output order is deterministic.
pub fn aggregate_records(
    records: &[BenchRecord],
    how: Aggregate,
) -> BTreeMap<(OperatorKind, Direction), Vec<AggregatedSample>> {
    let mut grouped: BTreeMap<(OperatorKind, Direction), BTreeMap<Vec<u64>, Vec<f64>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.vector.op, r.vector.direction))
            .or_default()
            .entry(r.vector.feats.clone())
            .or_default()
            .push(r.latency_us);
    }
    grouped
        .into_iter()
        .map(|(key, by_feats)| {
            let samples = by_feats
                .into_iter()
                .map(|(feats, lat)| AggregatedSample {
                    latency_us: aggregate(&lat, how),
                    replicates: lat.len(),
                    feats,
                })
                .collect();
            (key, samples)
        })
        .collect()
}
