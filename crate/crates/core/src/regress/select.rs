use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fit_candidate, Hyperparams, ModelKind, RegressError, Sample, TrainedRegressor};
use crate::report::sig6;
use crate::workload::{Direction, OperatorKind};

pub const MIN_SAMPLES: usize = 10;
const VALIDATION_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
}

impl Candidate {
    pub fn forest(n_trees: usize, max_depth: usize) -> Self {
        Candidate {
            kind: ModelKind::Forest,
            hyperparams: Hyperparams::forest(n_trees, max_depth),
        }
    }

    pub fn gbt(n_trees: usize, learning_rate: f64, max_depth: usize) -> Self {
        Candidate {
            kind: ModelKind::Gbt,
            hyperparams: Hyperparams::gbt(n_trees, learning_rate, max_depth),
        }
    }

    pub fn describe(&self) -> String {
        let hp = &self.hyperparams;
        match self.kind {
            ModelKind::Forest => format!("forest(trees={}, depth={})", hp.n_trees, hp.max_depth),
            ModelKind::Gbt => format!(
                "gbt(trees={}, lr={}, depth={})",
                hp.n_trees, hp.learning_rate, hp.max_depth
            ),
        }
    }

    /// Everything except the tree count. Candidates sharing this key grow
    /// identical leading trees, so the largest one is fitted once and then
    /// truncated.
    fn family(&self) -> (ModelKind, usize, usize, u64, bool, Option<usize>) {
        let hp = &self.hyperparams;
        (
            self.kind,
            hp.max_depth,
            hp.min_samples_leaf,
            hp.learning_rate.to_bits(),
            hp.bootstrap,
            hp.max_features,
        )
    }
}

/// Forests of 50 or 200 trees at depth 8 or 12, and boosted ensembles of 200
/// or 500 trees with learning rate 0.05 or 0.1 at depth 4 or 6.
pub fn default_candidates() -> Vec<Candidate> {
    let mut out = Vec::new();
    for n in [50, 200] {
        for depth in [8, 12] {
            out.push(Candidate::forest(n, depth));
        }
    }
    for n in [200, 500] {
        for lr in [0.05, 0.1] {
            for depth in [4, 6] {
                out.push(Candidate::gbt(n, lr, depth));
            }
        }
    }
    out
}

/// Mean absolute percentage error, in percent.
pub fn mape(predicted: &[f64], actual: &[f64]) -> f64 {
    let n = actual.len().min(predicted.len());
    if n == 0 {
        return f64::NAN;
    }
    let total: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| ((p - a) / a).abs())
        .sum();
    100.0 * total / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub candidate: Candidate,
    pub val_mape: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub op: OperatorKind,
    pub direction: Direction,
    pub scores: Vec<CandidateScore>,
    pub selected: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Rows in the final refit (the whole dataset).
    pub n_refit: usize,
}

impl FitReport {
    pub fn selected_score(&self) -> &CandidateScore {
        &self.scores[self.selected]
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{}/{}: {} train, {} validation, refit on {}\n",
            self.op, self.direction, self.n_train, self.n_val, self.n_refit
        );
        for (i, s) in self.scores.iter().enumerate() {
            let mark = if i == self.selected { "*" } else { " " };
            let _ = writeln!(out, "{mark} {:<36} val_mape={}%", s.candidate.describe(), sig6(s.val_mape));
        }
        out
    }
}

fn better(a: &CandidateScore, b: &CandidateScore) -> bool {
    let key = |s: &CandidateScore| {
        let m = if s.val_mape.is_nan() { f64::INFINITY } else { s.val_mape };
        (m, s.candidate.hyperparams.n_trees, s.candidate.hyperparams.max_depth)
    };
    let (ma, ta, da) = key(a);
    let (mb, tb, db) = key(b);
    match ma.total_cmp(&mb) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => (ta, da) < (tb, db),
    }
}

/// Scores every candidate on a seeded 80/20 split and refits the winner on
/// all samples. Ties go to fewer trees, then shallower trees, then the
/// earlier candidate.
pub fn select_model(
    op: OperatorKind,
    direction: Direction,
    samples: &[Sample],
    candidates: &[Candidate],
    log_target: bool,
    seed: u64,
) -> Result<(TrainedRegressor, FitReport), RegressError> {
    if samples.len() < MIN_SAMPLES {
        return Err(RegressError::InsufficientData {
            op,
            direction,
            needed: MIN_SAMPLES,
            have: samples.len(),
        });
    }
    if candidates.is_empty() {
        return Err(RegressError::NoCandidates);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((samples.len() as f64 * VALIDATION_SHARE).round() as usize).max(1);
    let val: Vec<&Sample> = order[..n_val].iter().map(|&i| &samples[i]).collect();
    let train: Vec<Sample> = order[n_val..].iter().map(|&i| samples[i].clone()).collect();
    let actual: Vec<f64> = val.iter().map(|s| s.target).collect();

    let mut families: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        families.entry(c.family()).or_default().push(i);
    }
    let mut val_mape = vec![f64::NAN; candidates.len()];
    for members in families.values() {
        let largest = members
            .iter()
            .copied()
            .max_by_key(|&i| candidates[i].hyperparams.n_trees)
            .expect("non-empty family");
        let full = fit_candidate(op, direction, &train, &candidates[largest], log_target, seed)?;
        for &i in members {
            let mut model = full.clone();
            model.trees.truncate(candidates[i].hyperparams.n_trees);
            model.hyperparams.n_trees = candidates[i].hyperparams.n_trees;
            let predicted: Vec<f64> = val.iter().map(|s| model.predict_feats(&s.feats)).collect();
            val_mape[i] = mape(&predicted, &actual);
        }
    }

    let scores: Vec<CandidateScore> = candidates
        .iter()
        .zip(&val_mape)
        .map(|(c, &m)| CandidateScore {
            candidate: *c,
            val_mape: m,
        })
        .collect();
    let mut selected = 0;
    for i in 1..scores.len() {
        if better(&scores[i], &scores[selected]) {
            selected = i;
        }
    }
    let mut model = fit_candidate(op, direction, samples, &candidates[selected], log_target, seed)?;
    model.train_stats.val_mape = Some(scores[selected].val_mape);
    let report = FitReport {
        op,
        direction,
        scores,
        selected,
        n_train: train.len(),
        n_val,
        n_refit: samples.len(),
    };
    Ok((model, report))
}
