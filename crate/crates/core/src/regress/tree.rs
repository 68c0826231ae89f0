//! CART regression trees with exact variance-reduction splits.
//!
//! Feature values are ranked once per fit; every node then accumulates
//! per-rank target sums, so a split search costs O(n) plus a sort of the
//! ranks present in the node.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RegressError, Sample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

/// A fitted tree stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per split; `None` means all of them.
    pub max_features: Option<usize>,
}

/// Features ranked once and shared by every tree fitted on the same rows.
pub(crate) struct Binned {
    pub n_features: usize,
    /// `rank[f][i]`: position of sample i's value among feature f's uniques.
    rank: Vec<Vec<u32>>,
    /// Sorted unique values of each feature.
    values: Vec<Vec<f64>>,
}

impl Binned {
    pub fn new(samples: &[Sample]) -> Result<Self, RegressError> {
        let n_features = samples.first().map(|s| s.feats.len()).ok_or(RegressError::Empty)?;
        if samples.iter().any(|s| s.feats.len() != n_features) {
            return Err(RegressError::Shape("samples have differing feature counts".into()));
        }
        if samples
            .iter()
            .any(|s| !s.target.is_finite() || s.feats.iter().any(|x| !x.is_finite()))
        {
            return Err(RegressError::Shape("non-finite feature or target".into()));
        }
        let mut rank = Vec::with_capacity(n_features);
        let mut values = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let mut uniq: Vec<f64> = samples.iter().map(|s| s.feats[f]).collect();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            let r = samples
                .iter()
                .map(|s| uniq.partition_point(|&v| v < s.feats[f]) as u32)
                .collect();
            rank.push(r);
            values.push(uniq);
        }
        Ok(Binned {
            n_features,
            rank,
            values,
        })
    }
}

struct Scratch {
    count: Vec<Vec<u32>>,
    sum: Vec<Vec<f64>>,
    touched: Vec<u32>,
    buf: Vec<usize>,
}

struct Builder<'a> {
    binned: &'a Binned,
    y: &'a [f64],
    params: TreeParams,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    scratch: Scratch,
    features: Vec<usize>,
    /// When present, receives each row's leaf value.
    fitted: Option<&'a mut [f64]>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    rank: u32,
    threshold: f64,
}

impl Builder<'_> {
    fn make_leaf(&mut self, idx: &[usize], value: f64) -> usize {
        if let Some(fitted) = self.fitted.as_deref_mut() {
            for &i in idx {
                fitted[i] = value;
            }
        }
        self.nodes.push(TreeNode::Leaf { value });
        self.nodes.len() - 1
    }

    fn best_split(&mut self, idx: &[usize], sum: f64, sse: f64) -> Option<BestSplit> {
        let n = idx.len() as f64;
        let min_leaf = self.params.min_samples_leaf.max(1) as u32;
        let mut feats = self.features.clone();
        if let Some(k) = self.params.max_features {
            if k < feats.len() {
                feats.shuffle(&mut self.rng);
                feats.truncate(k.max(1));
                feats.sort_unstable();
            }
        }
        let parent = sum * sum / n;
        let mut best: Option<BestSplit> = None;
        for f in feats {
            let ranks = &self.binned.rank[f];
            let count = &mut self.scratch.count[f];
            let bsum = &mut self.scratch.sum[f];
            let touched = &mut self.scratch.touched;
            touched.clear();
            for &i in idx {
                let r = ranks[i] as usize;
                if count[r] == 0 {
                    touched.push(r as u32);
                }
                count[r] += 1;
                bsum[r] += self.y[i];
            }
            touched.sort_unstable();
            let total = idx.len() as u32;
            let (mut nl, mut sl) = (0u32, 0.0f64);
            for w in 0..touched.len().saturating_sub(1) {
                let r = touched[w] as usize;
                nl += count[r];
                sl += bsum[r];
                let nr = total - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let sr = sum - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                if gain > 1e-12 * sse && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let lo = self.binned.values[f][r];
                    let hi = self.binned.values[f][touched[w + 1] as usize];
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        rank: r as u32,
                        threshold: if mid < hi { mid } else { lo },
                    });
                }
            }
            for &r in touched.iter() {
                count[r as usize] = 0;
                bsum[r as usize] = 0.0;
            }
        }
        best
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(self.y[i]), hi.max(self.y[i]))
        });
        if lo == hi {
            return self.make_leaf(idx, lo);
        }
        if depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf.max(1) {
            return self.make_leaf(idx, mean);
        }
        let sse: f64 = idx.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
        let Some(split) = self.best_split(idx, sum, sse) else {
            return self.make_leaf(idx, mean);
        };

        // stable partition keeps child row order independent of history
        let ranks = &self.binned.rank[split.feature];
        let buf = &mut self.scratch.buf;
        buf.clear();
        let mut left = 0;
        for k in 0..n {
            let i = idx[k];
            if ranks[i] <= split.rank {
                idx[left] = i;
                left += 1;
            } else {
                buf.push(i);
            }
        }
        idx[left..].copy_from_slice(buf);

        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: mean });
        let (l_idx, r_idx) = idx.split_at_mut(left);
        let l = self.build(l_idx, depth + 1);
        let r = self.build(r_idx, depth + 1);
        self.nodes[me] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        me
    }
}

/// Fits one tree on the rows listed in `rows` (repeats allowed, as in a
/// bootstrap resample). `fitted`, when given, receives each row's prediction.
pub(crate) fn fit_rows(
    binned: &Binned,
    y: &[f64],
    rows: &mut [usize],
    params: TreeParams,
    seed: u64,
    fitted: Option<&mut [f64]>,
) -> Tree {
    let mut builder = Builder {
        binned,
        y,
        params,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        scratch: Scratch {
            count: binned.values.iter().map(|v| vec![0; v.len()]).collect(),
            sum: binned.values.iter().map(|v| vec![0.0; v.len()]).collect(),
            touched: Vec::new(),
            buf: Vec::new(),
        },
        features: (0..binned.n_features).collect(),
        fitted,
    };
    builder.build(rows, 0);
    Tree { nodes: builder.nodes }
}

/// Fits a single CART tree on raw targets.
pub fn fit_tree(
    samples: &[Sample],
    max_depth: usize,
    min_samples_leaf: usize,
    rng_seed: u64,
) -> Result<Tree, RegressError> {
    let binned = Binned::new(samples)?;
    let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let mut rows: Vec<usize> = (0..samples.len()).collect();
    let params = TreeParams {
        max_depth,
        min_samples_leaf,
        max_features: None,
    };
    Ok(fit_rows(&binned, &y, &mut rows, params, rng_seed, None))
}
