//! Tree-ensemble latency regressors, one per (operator, direction) pair.

mod format;
mod select;
mod tree;

pub use format::{load_model, parse_model, save_model, write_model};
pub use select::{default_candidates, mape, select_model, Candidate, CandidateScore, FitReport};
pub use tree::{fit_tree, Tree, TreeNode, TreeParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::benchkit::{aggregate_records, mix_seed, Aggregate, BenchRecord};
use crate::workload::{Direction, OperatorKind, WorkloadVector};
use tree::{fit_rows, Binned};

/// Exponent bound applied before `exp` on log-space predictions.
const LOG_CLAMP: f64 = 700.0;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("no training samples")]
    Empty,
    #[error("{0}")]
    Shape(String),
    #[error("{op}/{direction}: need at least {needed} samples, have {have}")]
    InsufficientData {
        op: OperatorKind,
        direction: Direction,
        needed: usize,
        have: usize,
    },
    #[error("model is for {expected}, got a {found} vector")]
    OpMismatch { expected: String, found: String },
    #[error("empty candidate grid")]
    NoCandidates,
    #[error("log-space fit needs positive targets")]
    NonPositiveTarget,
    #[error("model format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feats: Vec<f64>,
    pub target: f64,
}

impl Sample {
    pub fn new(feats: Vec<f64>, target: f64) -> Self {
        Sample { feats, target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Forest,
    Gbt,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Forest => "forest",
            ModelKind::Gbt => "gbt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Boosting shrinkage; ignored by forests.
    pub learning_rate: f64,
    /// Forest row resampling with replacement.
    pub bootstrap: bool,
    pub max_features: Option<usize>,
}

impl Hyperparams {
    pub fn forest(n_trees: usize, max_depth: usize) -> Self {
        Hyperparams {
            n_trees,
            max_depth,
            min_samples_leaf: 1,
            learning_rate: 0.0,
            bootstrap: true,
            max_features: None,
        }
    }

    pub fn gbt(n_trees: usize, learning_rate: f64, max_depth: usize) -> Self {
        Hyperparams {
            n_trees,
            max_depth,
            min_samples_leaf: 1,
            learning_rate,
            bootstrap: false,
            max_features: None,
        }
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            max_features: self.max_features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub n_samples: usize,
    /// Validation MAPE in percent, when a holdout was scored.
    pub val_mape: Option<f64>,
}

/// A fitted ensemble. Forest output is the mean of its trees; boosted output
/// is `base + learning_rate * sum(trees)`. Log-target models return the
/// exponential of that value.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRegressor {
    pub op: OperatorKind,
    pub direction: Direction,
    pub kind: ModelKind,
    pub trees: Vec<Tree>,
    pub base: f64,
    pub log_target: bool,
    pub hyperparams: Hyperparams,
    pub train_stats: TrainStats,
    /// Per-feature `(min, max)` seen in training.
    pub feature_bounds: Vec<(f64, f64)>,
}

/// A prediction plus whether its input lies outside the training box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub latency_us: f64,
    pub extrapolated: bool,
}

impl TrainedRegressor {
    /// A model that predicts `value` everywhere.
    pub fn constant(op: OperatorKind, direction: Direction, value: f64) -> Self {
        TrainedRegressor {
            op,
            direction,
            kind: ModelKind::Forest,
            trees: vec![Tree::leaf(value)],
            base: 0.0,
            log_target: false,
            hyperparams: Hyperparams::forest(1, 0),
            train_stats: TrainStats {
                n_samples: 0,
                val_mape: None,
            },
            feature_bounds: Vec::new(),
        }
    }

    /// Ensemble output in model space (log space for log-target models).
    pub fn raw_predict(&self, x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Forest => {
                if self.trees.is_empty() {
                    return self.base;
                }
                self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
            }
            ModelKind::Gbt => {
                self.base
                    + self.hyperparams.learning_rate
                        * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
            }
        }
    }

    pub fn predict_feats(&self, x: &[f64]) -> f64 {
        let raw = self.raw_predict(x);
        if self.log_target {
            raw.clamp(-LOG_CLAMP, LOG_CLAMP).exp()
        } else {
            raw.max(0.0)
        }
    }

    pub fn is_extrapolation(&self, x: &[f64]) -> bool {
        self.feature_bounds
            .iter()
            .zip(x)
            .any(|(&(lo, hi), &v)| v < lo || v > hi)
    }

    pub fn predict_latency(&self, vec: &WorkloadVector) -> Result<f64, RegressError> {
        Ok(self.predict(vec)?.latency_us)
    }

    pub fn predict(&self, vec: &WorkloadVector) -> Result<Prediction, RegressError> {
        if vec.op != self.op || vec.direction != self.direction {
            return Err(RegressError::OpMismatch {
                expected: format!("{}/{}", self.op, self.direction),
                found: format!("{}/{}", vec.op, vec.direction),
            });
        }
        let x = vec.feats_f64();
        Ok(Prediction {
            latency_us: self.predict_feats(&x),
            extrapolated: self.is_extrapolation(&x),
        })
    }
}

fn prepare(samples: &[Sample], log_target: bool) -> Result<(Binned, Vec<f64>), RegressError> {
    let binned = Binned::new(samples)?;
    if log_target && samples.iter().any(|s| s.target <= 0.0) {
        return Err(RegressError::NonPositiveTarget);
    }
    let y = samples
        .iter()
        .map(|s| if log_target { s.target.ln() } else { s.target })
        .collect();
    Ok((binned, y))
}

fn bounds(samples: &[Sample]) -> Vec<(f64, f64)> {
    let k = samples.first().map_or(0, |s| s.feats.len());
    (0..k)
        .map(|f| {
            samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.feats[f]), hi.max(s.feats[f]))
            })
        })
        .collect()
}

/// Random forest of CART trees. Tree `t` draws its bootstrap sample and
/// feature subsets from a generator seeded by `(seed, t)`.
pub fn fit_forest(
    op: OperatorKind,
    direction: Direction,
    samples: &[Sample],
    hp: Hyperparams,
    log_target: bool,
    seed: u64,
) -> Result<TrainedRegressor, RegressError> {
    let (binned, y) = prepare(samples, log_target)?;
    let n = samples.len();
    let trees: Vec<Tree> = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = mix_seed(&[seed, t as u64]);
            let mut rows: Vec<usize> = if hp.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_rows(&binned, &y, &mut rows, hp.tree_params(), tree_seed ^ 1, None)
        })
        .collect();
    Ok(TrainedRegressor {
        op,
        direction,
        kind: ModelKind::Forest,
        trees,
        base: y.iter().sum::<f64>() / n as f64,
        log_target,
        hyperparams: hp,
        train_stats: TrainStats {
            n_samples: n,
            val_mape: None,
        },
        feature_bounds: bounds(samples),
    })
}

/// Least-squares gradient boosting: start from the target mean and fit each
/// tree to the current residuals.
pub fn fit_gbt(
    op: OperatorKind,
    direction: Direction,
    samples: &[Sample],
    hp: Hyperparams,
    log_target: bool,
    seed: u64,
) -> Result<TrainedRegressor, RegressError> {
    let (binned, y) = prepare(samples, log_target)?;
    let n = samples.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut current = vec![base; n];
    let mut residual = vec![0.0; n];
    let mut fitted = vec![0.0; n];
    let mut rows: Vec<usize> = Vec::with_capacity(n);
    let mut trees = Vec::with_capacity(hp.n_trees);
    for t in 0..hp.n_trees {
        for i in 0..n {
            residual[i] = y[i] - current[i];
        }
        rows.clear();
        rows.extend(0..n);
        let tree = fit_rows(
            &binned,
            &residual,
            &mut rows,
            hp.tree_params(),
            mix_seed(&[seed, t as u64]),
            Some(&mut fitted),
        );
        for i in 0..n {
            current[i] += hp.learning_rate * fitted[i];
        }
        trees.push(tree);
    }
    Ok(TrainedRegressor {
        op,
        direction,
        kind: ModelKind::Gbt,
        trees,
        base,
        log_target,
        hyperparams: hp,
        train_stats: TrainStats {
            n_samples: n,
            val_mape: None,
        },
        feature_bounds: bounds(samples),
    })
}

pub fn fit_candidate(
    op: OperatorKind,
    direction: Direction,
    samples: &[Sample],
    candidate: &Candidate,
    log_target: bool,
    seed: u64,
) -> Result<TrainedRegressor, RegressError> {
    match candidate.kind {
        ModelKind::Forest => fit_forest(op, direction, samples, candidate.hyperparams, log_target, seed),
        ModelKind::Gbt => fit_gbt(op, direction, samples, candidate.hyperparams, log_target, seed),
    }
}

/// Aggregates benchmark replicates and selects one model per
/// (operator, direction) group. Each group's seed is derived from `seed` and
/// the group key, so groups are independent of each other.
pub fn fit_records(
    records: &[BenchRecord],
    candidates: &[Candidate],
    how: Aggregate,
    log_target: bool,
    seed: u64,
) -> Result<Vec<(TrainedRegressor, FitReport)>, RegressError> {
    let groups: Vec<((OperatorKind, Direction), Vec<Sample>)> = aggregate_records(records, how)
        .into_iter()
        .map(|(key, agg)| {
            let samples = agg
                .into_iter()
                .map(|a| Sample::new(a.feats.iter().map(|&f| f as f64).collect(), a.latency_us))
                .collect();
            (key, samples)
        })
        .collect();
    groups
        .par_iter()
        .map(|((op, dir), samples)| {
            let group_seed = mix_seed(&[seed, *op as u64, *dir as u64]);
            select_model(*op, *dir, samples, candidates, log_target, group_seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const OP: OperatorKind = OperatorKind::Linear1;
    const DIR: Direction = Direction::Fwd;

    fn grid_samples(f: impl Fn(f64, f64) -> f64) -> Vec<Sample> {
        let mut out = Vec::new();
        for a in 1..=12 {
            for b in 1..=12 {
                let (x, y) = (a as f64 * 64.0, b as f64 * 32.0);
                out.push(Sample::new(vec![x, y], f(x, y)));
            }
        }
        out
    }

    #[test]
    fn single_tree_forest_matches_cart() {
        let data = grid_samples(|x, y| x * y + 3.0);
        let hp = Hyperparams {
            bootstrap: false,
            ..Hyperparams::forest(1, 4)
        };
        let forest = fit_forest(OP, DIR, &data, hp, false, 9).unwrap();
        let tree = fit_tree(&data, 4, 1, 0).unwrap();
        for s in &data {
            assert_eq!(forest.predict_feats(&s.feats), tree.predict(&s.feats));
        }
    }

    #[test]
    fn forest_is_seed_deterministic() {
        let data = grid_samples(|x, y| x + y * y);
        let a = fit_forest(OP, DIR, &data, Hyperparams::forest(10, 6), true, 3).unwrap();
        let b = fit_forest(OP, DIR, &data, Hyperparams::forest(10, 6), true, 3).unwrap();
        let c = fit_forest(OP, DIR, &data, Hyperparams::forest(10, 6), true, 4).unwrap();
        assert_eq!(save_string(&a), save_string(&b));
        assert_ne!(save_string(&a), save_string(&c));
    }

    fn save_string(m: &TrainedRegressor) -> String {
        let mut buf = Vec::new();
        write_model(&mut buf, m).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn zero_rounds_is_mean() {
        let data = grid_samples(|x, _| x);
        let m = fit_gbt(OP, DIR, &data, Hyperparams::gbt(0, 0.1, 3), false, 0).unwrap();
        let mean = data.iter().map(|s| s.target).sum::<f64>() / data.len() as f64;
        assert_eq!(m.predict_feats(&[64.0, 32.0]), mean);
    }

    #[test]
    fn one_boosting_round_reduces_residual() {
        let data = grid_samples(|x, y| x * 2.0 + y);
        let sse = |m: &TrainedRegressor| -> f64 {
            data.iter().map(|s| (m.predict_feats(&s.feats) - s.target).powi(2)).sum()
        };
        let zero = fit_gbt(OP, DIR, &data, Hyperparams::gbt(0, 1.0, 3), false, 0).unwrap();
        let one = fit_gbt(OP, DIR, &data, Hyperparams::gbt(1, 1.0, 3), false, 0).unwrap();
        assert!(sse(&one) < sse(&zero));
    }

    #[test]
    fn constant_and_mean_of_trees() {
        let m = TrainedRegressor::constant(OP, DIR, 7.0);
        let v = WorkloadVector::new(OP, DIR, vec![1, 2, 3]).unwrap();
        assert_eq!(m.predict_latency(&v).unwrap(), 7.0);
        let two = TrainedRegressor {
            trees: vec![Tree::leaf(6.0), Tree::leaf(8.0)],
            ..m.clone()
        };
        assert_eq!(two.predict_latency(&v).unwrap(), 7.0);
        let other = WorkloadVector::new(OP, Direction::Bwd, vec![1, 2, 3]).unwrap();
        assert!(matches!(m.predict(&other), Err(RegressError::OpMismatch { .. })));
    }

    #[test]
    fn log_space_clamp_stays_finite() {
        let m = TrainedRegressor {
            log_target: true,
            ..TrainedRegressor::constant(OP, DIR, 1e6)
        };
        assert!(m.predict_feats(&[1.0, 1.0, 1.0]).is_finite());
    }

    #[test]
    fn extrapolation_flag() {
        let data = grid_samples(|x, y| x + y);
        let m = fit_gbt(OP, DIR, &data, Hyperparams::gbt(5, 0.1, 2), true, 0).unwrap();
        assert!(!m.is_extrapolation(&[64.0, 32.0]));
        assert!(m.is_extrapolation(&[10_000.0, 32.0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn forest_output_within_target_range(
            targets in proptest::collection::vec(0.5f64..1e4, 12..60),
            seed in 0u64..1000,
            log in proptest::bool::ANY,
        ) {
            let data: Vec<Sample> = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| Sample::new(vec![i as f64, (i * 7 % 5) as f64], t))
                .collect();
            let lo = targets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = targets.iter().cloned().fold(0.0, f64::max);
            let m = fit_forest(OP, DIR, &data, Hyperparams::forest(8, 5), log, seed).unwrap();
            for x in 0..70 {
                let p = m.predict_feats(&[x as f64 - 5.0, (x % 6) as f64]);
                prop_assert!(p >= lo * (1.0 - 1e-12) && p <= hi * (1.0 + 1e-12), "{p} not in [{lo}, {hi}]");
            }
        }
    }
}
