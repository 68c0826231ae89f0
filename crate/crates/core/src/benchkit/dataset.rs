use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{
    default_comm_grid, default_compute_grid, default_optimizer_grid, gen_comm_grid,
    gen_compute_grid, GridSpec,
};
use super::oracle::{synth_latency, SynthHardwareModel};
use super::records::BenchRecord;
use super::{mix_seed, BenchError};
use crate::workload::{align_vocab, Direction, OpShape, OperatorKind, WorkloadVector};

/// Which operators to benchmark and over which sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPlan {
    pub hardware_id: String,
    #[serde(default = "default_vocab")]
    pub vocab_size_raw: u64,
    /// Node size used to enumerate communicator placements.
    #[serde(default = "default_gpn")]
    pub gpus_per_node: u64,
    /// Keep every `stride`-th distinct workload vector of each operator.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "all_ops", with = "op_names")]
    pub ops: Vec<OperatorKind>,
    /// Restricts generation to these directions; empty means all.
    #[serde(default)]
    pub directions: Vec<Direction>,
    #[serde(default = "default_compute_grid")]
    pub compute: GridSpec,
    #[serde(default = "default_optimizer_grid")]
    pub optimizer: GridSpec,
    /// Per-collective `entries`/`processes` ranges, keyed by operator name.
    /// Collectives not listed keep their default ranges.
    #[serde(default = "default_comm_grids", with = "comm_map")]
    pub comm: BTreeMap<OperatorKind, GridSpec>,
}

fn default_vocab() -> u64 {
    50257
}

fn default_gpn() -> u64 {
    4
}

fn default_stride() -> usize {
    1
}

fn all_ops() -> Vec<OperatorKind> {
    OperatorKind::ALL.to_vec()
}

fn default_comm_grids() -> BTreeMap<OperatorKind, GridSpec> {
    OperatorKind::ALL
        .iter()
        .filter_map(|&op| default_comm_grid(op).map(|g| (op, g)))
        .collect()
}

mod op_names {
    use super::OperatorKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ops: &[OperatorKind], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(ops.iter().map(|op| op.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<OperatorKind>, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

mod comm_map {
    use super::{BTreeMap, GridSpec, OperatorKind};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<OperatorKind, GridSpec>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(op, g)| (op.name(), g)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<OperatorKind, GridSpec>, D::Error> {
        let raw = BTreeMap::<String, GridSpec>::deserialize(d)?;
        let mut out = super::default_comm_grids();
        for (name, grid) in raw {
            let op: OperatorKind = name.parse().map_err(serde::de::Error::custom)?;
            if !op.is_comm() {
                return Err(serde::de::Error::custom(format!("`{name}` is not a collective")));
            }
            out.insert(op, grid);
        }
        Ok(out)
    }
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            hardware_id: "synthetic".into(),
            vocab_size_raw: default_vocab(),
            gpus_per_node: default_gpn(),
            stride: 1,
            ops: all_ops(),
            directions: Vec::new(),
            compute: default_compute_grid(),
            optimizer: default_optimizer_grid(),
            comm: default_comm_grids(),
        }
    }
}

impl DatasetPlan {
    fn wants(&self, dir: Direction) -> bool {
        self.directions.is_empty() || self.directions.contains(&dir)
    }

    /// Distinct feature vectors of `op` in grid order, before subsampling.
    pub fn feature_vectors(&self, op: OperatorKind) -> Result<Vec<Vec<u64>>, BenchError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut keep = |f: Vec<u64>| {
            if seen.insert(f.clone()) {
                out.push(f);
            }
        };
        if op == OperatorKind::Optimizer {
            let idx = self.optimizer.require(&["mp", "d", "encoders"])?;
            for p in self.optimizer.points()? {
                let f = vec![p[idx[0]], p[idx[1]], p[idx[2]]];
                if !f.contains(&0) {
                    keep(f);
                }
            }
        } else if op.is_comm() {
            let Some(grid) = self.comm.get(&op) else {
                return Err(BenchError::Grid {
                    axis: op.name().into(),
                    reason: "no sampling range for this collective".into(),
                });
            };
            let gpn = self.gpus_per_node.max(1);
            for point in gen_comm_grid(grid, 1)? {
                // every way of spreading the group over whole nodes
                for per_node in (1..=point.processes.min(gpn)).rev() {
                    if point.processes % per_node == 0 && point.entries > 0 {
                        keep(vec![point.entries, point.processes / per_node, per_node]);
                    }
                }
            }
        } else {
            for p in gen_compute_grid(&self.compute)? {
                let shape = OpShape {
                    b: p.b,
                    l: p.l,
                    d: p.d,
                    h: p.h,
                    mp: p.mp,
                    v: align_vocab(self.vocab_size_raw, p.mp),
                };
                if shape.validate().is_err() {
                    continue;
                }
                if let Some(f) = shape.compute_feats(op) {
                    keep(f);
                }
            }
        }
        Ok(out)
    }
}

/// Generates synthetic benchmark records for every planned operator.
///
/// Each record's noise draw is seeded from `(seed, op, direction, vector
/// index, replicate)`, so the output does not depend on thread scheduling.
pub fn synth_dataset(
    plan: &DatasetPlan,
    hw: &SynthHardwareModel,
    seed: u64,
    replicates: u32,
) -> Result<Vec<BenchRecord>, BenchError> {
    hw.validate()?;
    let mut records = Vec::new();
    for &op in &plan.ops {
        let vectors: Vec<Vec<u64>> = plan
            .feature_vectors(op)?
            .into_iter()
            .step_by(plan.stride.max(1))
            .collect();
        for &dir in op.directions().iter().filter(|&&d| plan.wants(d)) {
            let batch: Result<Vec<Vec<BenchRecord>>, BenchError> = vectors
                .par_iter()
                .enumerate()
                .map(|(i, feats)| {
                    let vector = WorkloadVector::new(op, dir, feats.clone())
                        .map_err(|e| BenchError::InvalidRecord(e.to_string()))?;
                    (0..replicates)
                        .map(|r| {
                            let s = mix_seed(&[seed, op as u64, dir as u64, i as u64, r as u64]);
                            let latency = synth_latency(&vector, hw, s);
                            BenchRecord::new(vector.clone(), latency, plan.hardware_id.clone(), r)
                        })
                        .collect()
                })
                .collect();
            records.extend(batch?.into_iter().flatten());
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchkit::{read_csv, write_csv, GridAxis, Step};

    fn tiny_plan() -> DatasetPlan {
        DatasetPlan {
            ops: vec![OperatorKind::Linear1],
            directions: vec![Direction::Fwd],
            compute: GridSpec::new(vec![
                GridAxis::new("mp", 1, Step::Fixed, 1),
                GridAxis::new("b", 4, Step::Fixed, 4),
                GridAxis::new("h", 16, Step::Fixed, 16),
                GridAxis::new("l", 1024, Step::Fixed, 1024),
                GridAxis::new("d", 2048, Step::Add(512), 2560),
            ]),
            ..DatasetPlan::default()
        }
    }

    #[test]
    fn record_count() {
        let recs = synth_dataset(&tiny_plan(), &SynthHardwareModel::default(), 1, 3).unwrap();
        assert_eq!(recs.len(), 6);
    }

    #[test]
    fn matches_oracle_and_is_deterministic() {
        let hw = SynthHardwareModel {
            noise_sigma: 0.05,
            ..SynthHardwareModel::default()
        };
        let plan = tiny_plan();
        let a = synth_dataset(&plan, &hw, 7, 2).unwrap();
        let b = synth_dataset(&plan, &hw, 7, 2).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_csv(&mut ca, &a).unwrap();
        write_csv(&mut cb, &b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(read_csv(ca.as_slice()).unwrap(), a);
        for (i, r) in a.iter().enumerate() {
            let idx = (i / 2) as u64;
            let s = mix_seed(&[7, OperatorKind::Linear1 as u64, Direction::Fwd as u64, idx, r.replicate as u64]);
            assert_eq!(r.latency_us, synth_latency(&r.vector, &hw, s));
        }
        assert_ne!(a[0].latency_us, a[1].latency_us);
    }

    #[test]
    fn comm_placements() {
        let plan = DatasetPlan::default();
        let v = plan.feature_vectors(OperatorKind::MpAllReduce).unwrap();
        let first: Vec<_> = v.iter().take(8).cloned().collect();
        assert_eq!(
            first,
            vec![
                vec![20_900_000, 1, 2],
                vec![20_900_000, 2, 1],
                vec![20_900_000, 1, 4],
                vec![20_900_000, 2, 2],
                vec![20_900_000, 4, 1],
                vec![20_900_000, 2, 4],
                vec![20_900_000, 4, 2],
                vec![20_900_000, 8, 1],
            ]
        );
        let p2p = plan.feature_vectors(OperatorKind::PpP2p).unwrap();
        assert!(p2p.iter().all(|f| f[1] * f[2] == 2));
    }

    #[test]
    fn stride_keeps_ceiling_share() {
        let mut plan = DatasetPlan {
            ops: vec![OperatorKind::LayerNorm],
            ..DatasetPlan::default()
        };
        let full = plan.feature_vectors(OperatorKind::LayerNorm).unwrap().len();
        plan.stride = 10;
        let recs = synth_dataset(&plan, &SynthHardwareModel::default(), 0, 1).unwrap();
        assert_eq!(recs.len(), 2 * full.div_ceil(10));
    }

    #[test]
    fn plan_from_toml() {
        let text = r#"
hardware_id = "desk"
ops = ["Linear1", "MPAllReduce"]
[compute]
mp = { start = 1, step = "x2", end = 2 }
b = { start = 4, step = "0", end = 4 }
h = { start = 16, step = "+8", end = 16 }
l = { start = 512, step = "+512", end = 1024 }
d = { start = 512, step = "+512", end = 1024 }
[comm.MPAllReduce]
entries = { start = 100, step = "+50", end = 200 }
processes = { start = 2, step = "x2", end = 4 }
"#;
        let plan: DatasetPlan = toml::from_str(text).unwrap();
        assert_eq!(plan.ops, vec![OperatorKind::Linear1, OperatorKind::MpAllReduce]);
        assert_eq!(plan.feature_vectors(OperatorKind::Linear1).unwrap().len(), 8);
        // 3 entries x (2 placements for p=2 + 3 for p=4)
        assert_eq!(plan.feature_vectors(OperatorKind::MpAllReduce).unwrap().len(), 15);
        let back: DatasetPlan = toml::from_str(&toml::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
        assert!(toml::from_str::<DatasetPlan>("hardware_id = 1").is_err());
        assert!(toml::from_str::<DatasetPlan>("hardware_id = \"x\"\n[comm.Linear1]\n").is_err());
    }
}
