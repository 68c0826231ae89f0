//! Parametric latency model standing in for GPU profiling data.
//!
//! Compute operators follow a roofline with a fixed launch cost; the
//! achievable fraction of peak throughput drops from `eff_high` to `eff_low`
//! whenever the operator's leading dimension is not a multiple of `tile`,
//! which reproduces the step-shaped scaling of tuned GEMM libraries.
//! Collectives follow an alpha-beta model with ring traffic factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::workload::{OperatorKind, WorkloadVector};

/// Bytes per tensor element (half precision).
pub const ELEM_BYTES: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthHardwareModel {
    /// flop/s
    pub peak_flops: f64,
    /// bytes/s
    pub mem_bw: f64,
    /// seconds added to every kernel
    pub kernel_latency: f64,
    pub tile: u64,
    pub eff_low: f64,
    pub eff_high: f64,
    /// seconds per log2 step of a collective
    pub alpha: f64,
    /// seconds per byte
    pub beta: f64,
    pub inter_node_penalty: f64,
    pub noise_sigma: f64,
}

impl Default for SynthHardwareModel {
    /// Roughly an A100 with NVLink inside a node.
    fn default() -> Self {
        SynthHardwareModel {
            peak_flops: 312e12,
            mem_bw: 1.555e12,
            kernel_latency: 5e-6,
            tile: 1,
            eff_low: 0.5,
            eff_high: 0.95,
            alpha: 10e-6,
            beta: 1.0 / 150e9,
            inter_node_penalty: 4.0,
            noise_sigma: 0.0,
        }
    }
}

impl SynthHardwareModel {
    pub fn validate(&self) -> Result<(), BenchError> {
        let rates = [
            ("peak_flops", self.peak_flops),
            ("mem_bw", self.mem_bw),
            ("eff_low", self.eff_low),
            ("eff_high", self.eff_high),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BenchError::Hardware(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("kernel_latency", self.kernel_latency),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BenchError::Hardware(format!("{name} must be non-negative")));
            }
        }
        if self.eff_low > self.eff_high || self.eff_high > 1.0 {
            return Err(BenchError::Hardware("need 0 < eff_low <= eff_high <= 1".into()));
        }
        if self.tile == 0 {
            return Err(BenchError::Hardware("tile must be positive".into()));
        }
        if self.inter_node_penalty < 1.0 {
            return Err(BenchError::Hardware("inter_node_penalty must be >= 1".into()));
        }
        Ok(())
    }

    fn efficiency(&self, leading_dim: u64) -> f64 {
        if leading_dim.is_multiple_of(self.tile) {
            self.eff_high
        } else {
            self.eff_low
        }
    }
}

/// Work performed by one compute-operator invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCost {
    pub flops: f64,
    pub bytes: f64,
    /// Dimension whose alignment decides kernel efficiency.
    pub leading_dim: u64,
}

/// Forward-pass flop and byte counts; the backward pass does twice the work.
pub fn op_cost(vec: &WorkloadVector) -> Option<OpCost> {
    use OperatorKind::*;
    let f: Vec<f64> = vec.feats_f64();
    let e = ELEM_BYTES;
    let gemm = |m: f64, k: f64, n: f64, lead: u64| OpCost {
        flops: 2.0 * m * k * n,
        bytes: (m * k + k * n + m * n) * e,
        leading_dim: lead,
    };
    let elementwise = |elems: f64, flops_per: f64, passes: f64, lead: u64| OpCost {
        flops: flops_per * elems,
        bytes: passes * elems * e,
        leading_dim: lead,
    };
    let u = &vec.feats;
    let cost = match vec.op {
        Embedding => OpCost {
            flops: f[0] * f[2],
            bytes: 2.0 * f[0] * f[2] * e,
            leading_dim: u[2],
        },
        LayerNorm => elementwise(f[0] * f[1] * f[2], 8.0, 2.0, u[2]),
        RmsNorm => elementwise(f[0] * f[1] * f[2], 5.0, 2.0, u[2]),
        Linear1 | Linear2 | Linear3 | Linear4 | FinalLinear => gemm(f[0], f[1], f[2], u[1]),
        Rope => elementwise(2.0 * f.iter().product::<f64>(), 3.0, 2.0, u[3]),
        Qkt => OpCost {
            flops: 2.0 * f[0] * f[1] * f[2] * f[3],
            bytes: (2.0 * f[0] * f[1] * f[2] + f[0] * f[1] * f[3]) * e,
            leading_dim: u[2],
        },
        Fillmask => elementwise(f.iter().product(), 1.0, 2.0, u[3]),
        Softmax => elementwise(f.iter().product(), 5.0, 2.0, u[3]),
        FusedSoftmax => elementwise(f.iter().product(), 6.0, 2.0, u[2]),
        VMul => OpCost {
            flops: 2.0 * f[0] * f[1] * f[2] * f[3],
            bytes: (f[0] * f[1] * f[2] + 2.0 * f[0] * f[1] * f[3]) * e,
            leading_dim: u[3],
        },
        FlashAttention => OpCost {
            flops: 4.0 * f[0] * f[2] * f[1] * f[1] * f[3],
            bytes: 4.0 * f[0] * f[1] * f[2] * f[3] * e,
            leading_dim: u[3],
        },
        Glue => elementwise(f[0] * f[1] * f[2], 8.0, 2.0, u[2]),
        ParallelCrossEntropy => elementwise(f[0] * f[1] * f[2], 5.0, 3.0, u[2]),
        Optimizer => {
            // approximate shard size of the stage's encoder weights
            let params = f[2] * 12.0 * f[1] * f[1] / f[0];
            OpCost {
                flops: 12.0 * params,
                bytes: 16.0 * params,
                leading_dim: u[1],
            }
        }
        MpAllReduce | DpAllReduce | DpAllGather | PpP2p => return None,
    };
    Some(cost)
}

fn ring_factor(op: OperatorKind, p: f64) -> f64 {
    match op {
        OperatorKind::MpAllReduce | OperatorKind::DpAllReduce => 2.0 * (p - 1.0) / p,
        OperatorKind::DpAllGather => (p - 1.0) / p,
        _ => 1.0,
    }
}

/// Noise-free latency in seconds.
fn base_latency_s(vec: &WorkloadVector, hw: &SynthHardwareModel) -> f64 {
    if vec.op.is_comm() {
        let entries = vec.feats[0] as f64;
        let nodes = vec.feats[1];
        let processes = nodes * vec.feats[2];
        let p = processes as f64;
        let hops = (processes as f64).log2().ceil();
        let mut t = hw.alpha * hops + hw.beta * entries * ELEM_BYTES * ring_factor(vec.op, p);
        if nodes > 1 {
            t *= hw.inter_node_penalty;
        }
        return t + hw.kernel_latency;
    }
    let cost = op_cost(vec).expect("compute operator");
    let scale = match vec.direction {
        crate::workload::Direction::Bwd => 2.0,
        _ => 1.0,
    };
    let mut bytes = cost.bytes * scale;
    if vec.op == OperatorKind::Embedding && scale > 1.0 {
        // gradient of the whole vocabulary shard is written back
        bytes += vec.feats[1] as f64 * vec.feats[2] as f64 * ELEM_BYTES;
    }
    let compute = cost.flops * scale / (hw.peak_flops * hw.efficiency(cost.leading_dim));
    let memory = bytes / hw.mem_bw;
    compute.max(memory) + hw.kernel_latency
}

/// Synthetic latency in microseconds.
///
/// With `noise_sigma > 0` the result is scaled by a lognormal factor drawn
/// from a generator seeded with `seed`.
pub fn synth_latency(vec: &WorkloadVector, hw: &SynthHardwareModel, seed: u64) -> f64 {
    let mut t = base_latency_s(vec, hw);
    if hw.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = StandardNormal.sample(&mut rng);
        t *= (hw.noise_sigma * z).exp();
    }
    t * 1e6
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Direction;

    fn v(op: OperatorKind, dir: Direction, feats: &[u64]) -> WorkloadVector {
        WorkloadVector::new(op, dir, feats.to_vec()).unwrap()
    }

    #[test]
    fn deterministic_without_noise() {
        let hw = SynthHardwareModel::default();
        let x = v(OperatorKind::Linear1, Direction::Fwd, &[8192, 6144, 4608]);
        assert_eq!(synth_latency(&x, &hw, 1), synth_latency(&x, &hw, 2));
    }

    #[test]
    fn noise_is_seeded() {
        let hw = SynthHardwareModel {
            noise_sigma: 0.1,
            ..Default::default()
        };
        let x = v(OperatorKind::Linear1, Direction::Fwd, &[8192, 6144, 4608]);
        assert_eq!(synth_latency(&x, &hw, 7), synth_latency(&x, &hw, 7));
        assert_ne!(synth_latency(&x, &hw, 7), synth_latency(&x, &hw, 8));
    }

    #[test]
    fn single_process_allreduce_is_latency_floor() {
        let hw = SynthHardwareModel::default();
        let x = v(OperatorKind::DpAllReduce, Direction::Na, &[1_000_000, 1, 1]);
        assert!((synth_latency(&x, &hw, 0) - hw.kernel_latency * 1e6).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_regime_is_linear() {
        let hw = SynthHardwareModel::default();
        let small = v(OperatorKind::MpAllReduce, Direction::Na, &[1 << 36, 1, 4]);
        let big = v(OperatorKind::MpAllReduce, Direction::Na, &[1 << 37, 1, 4]);
        let huge = v(OperatorKind::MpAllReduce, Direction::Na, &[1 << 40, 1, 4]);
        let larger = v(OperatorKind::MpAllReduce, Direction::Na, &[1 << 41, 1, 4]);
        let ratio = synth_latency(&big, &hw, 0) / synth_latency(&small, &hw, 0);
        let ratio_far = synth_latency(&larger, &hw, 0) / synth_latency(&huge, &hw, 0);
        assert!(ratio < 2.0 && ratio_far < 2.0);
        assert!(ratio_far > ratio);
        assert!((ratio_far - 2.0).abs() < 1e-5, "ratio {ratio_far}");
    }

    #[test]
    fn two_rank_allreduce_matches_p2p() {
        let hw = SynthHardwareModel::default();
        for (nodes, gpn) in [(1, 2), (2, 1)] {
            let ar = v(OperatorKind::MpAllReduce, Direction::Na, &[123_456, nodes, gpn]);
            let p2p = v(OperatorKind::PpP2p, Direction::Na, &[123_456, nodes, gpn]);
            assert_eq!(synth_latency(&ar, &hw, 0), synth_latency(&p2p, &hw, 0));
        }
    }

    #[test]
    fn steps_on_misaligned_dims() {
        let hw = SynthHardwareModel {
            tile: 64,
            eff_low: 0.5,
            eff_high: 0.95,
            kernel_latency: 0.0,
            mem_bw: 1e18,
            ..Default::default()
        };
        let aligned = v(OperatorKind::Qkt, Direction::Fwd, &[64, 2048, 128, 2048]);
        let misaligned = v(OperatorKind::Qkt, Direction::Fwd, &[64, 2048, 96, 2048]);
        let per_flop_a = synth_latency(&aligned, &hw, 0) / 128.0;
        let per_flop_m = synth_latency(&misaligned, &hw, 0) / 96.0;
        assert!((per_flop_m / per_flop_a - 0.95 / 0.5).abs() < 1e-9);
    }

    #[test]
    fn optimizer_shard_shrinks_with_mp() {
        let hw = SynthHardwareModel::default();
        let one = synth_latency(&v(OperatorKind::Optimizer, Direction::Na, &[1, 4096, 8]), &hw, 0);
        let four = synth_latency(&v(OperatorKind::Optimizer, Direction::Na, &[4, 4096, 8]), &hw, 0);
        assert!(four < one);
    }

    #[test]
    fn validation() {
        assert!(SynthHardwareModel::default().validate().is_ok());
        let bad = SynthHardwareModel {
            eff_low: 0.9,
            eff_high: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthHardwareModel {
            peak_flops: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn monotone_in_each_feature(
            op_idx in 0usize..22,
            base in proptest::collection::vec(1u64..512, 4),
            dim in 0usize..4,
            bump in 1u64..512,
        ) {
            let hw = SynthHardwareModel::default();
            let op = OperatorKind::ALL[op_idx];
            let arity = op.arity();
            let dim = dim % arity;
            // a wider tensor-parallel group shrinks each rank's optimizer shard
            proptest::prop_assume!(!(op == OperatorKind::Optimizer && dim == 0));
            let feats: Vec<u64> = base[..arity].to_vec();
            let mut bigger = feats.clone();
            bigger[dim] += bump;
            let dir = op.directions()[0];
            let a = synth_latency(&v(op, dir, &feats), &hw, 0);
            let b = synth_latency(&v(op, dir, &bigger), &hw, 0);
            proptest::prop_assert!(b >= a, "{op} dim {dim}: {a} -> {b}");
        }
    }
}
