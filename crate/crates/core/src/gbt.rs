//! Squared-error gradient boosting over depth-limited regression trees.
//!
//! Splits are exact and greedy: every midpoint between consecutive distinct
//! feature values is tried, the largest reduction in squared error wins, and
//! ties go to the lowest feature index and then the lowest threshold. With the
//! default `row_subsample = 1.0` fitting uses no randomness at all.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Smallest node that may still be split. Children may hold a single row.
    pub min_leaf: usize,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub row_subsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 2,
            row_subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidArgument("max_depth and min_leaf must be positive".into()));
        }
        if !(self.row_subsample > 0.0 && self.row_subsample <= 1.0) {
            return Err(Error::InvalidArgument("row_subsample outside (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    /// Goes left when `x[feature] <= threshold`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            Node::Leaf { .. } => None,
            Node::Split {
                feature, left, right, ..
            } => [Some(*feature), left.max_feature(), right.max_feature()]
                .into_iter()
                .flatten()
                .max(),
        }
    }
}

/// The meta model: `base + lr * sum(trees)`, clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRegressor {
    pub base: f64,
    pub lr: f64,
    pub trees: Vec<Node>,
    pub params: GbtParams,
    pub feature_dim: usize,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    residual: &'a [f64],
    params: &'a GbtParams,
    dim: usize,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(&self, rows: &[usize]) -> Node {
        let sum: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        Node::Leaf {
            value: sum / rows.len() as f64,
        }
    }

    fn best_split(&self, rows: &[usize]) -> Option<BestSplit> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let sse: f64 = rows
            .iter()
            .map(|&i| {
                let d = self.residual[i] - total / n as f64;
                d * d
            })
            .sum();
        let parent = total * total / n as f64;
        let mut best: Option<(f64, usize, f64, usize)> = None;
        let mut order = rows.to_vec();
        for f in 0..self.dim {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.residual[order[k - 1]];
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / k as f64
                    + right_sum * right_sum / (n - k) as f64
                    - parent;
                if best.is_none_or(|(g, ..)| gain > g) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((gain, f, threshold, k));
                }
            }
        }
        let (gain, feature, threshold, _) = best?;
        if !(gain > 1e-14 * sse.max(f64::MIN_POSITIVE)) || gain <= 0.0 {
            return None;
        }
        let (left, right) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        Some(BestSplit {
            gain,
            feature,
            threshold,
            left,
            right,
        })
    }

    fn grow(&self, rows: &[usize], depth: usize) -> Node {
        if depth >= self.params.max_depth || rows.len() < self.params.min_leaf.max(2) {
            return self.leaf(rows);
        }
        match self.best_split(rows) {
            Some(s) => {
                debug_assert!(s.gain > 0.0);
                Node::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left: Box::new(self.grow(&s.left, depth + 1)),
                    right: Box::new(self.grow(&s.right, depth + 1)),
                }
            }
            None => self.leaf(rows),
        }
    }
}

fn mean_squared(residual: &[f64]) -> f64 {
    residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64
}

impl MetaRegressor {
    /// Fits the booster and returns it with the training MSE after every
    /// round (entry 0 is the base-only model).
    pub fn fit_traced(x: &[Vec<f64>], y: &[f64], params: &GbtParams) -> Result<(MetaRegressor, Vec<f64>)> {
        params.validate()?;
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        if x.len() < 2 {
            return Err(Error::DegenerateTraining(format!("{} training rows", x.len())));
        }
        let dim = x[0].len();
        if dim == 0 {
            return Err(Error::DegenerateTraining("zero-dimensional features".into()));
        }
        if let Some(row) = x.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateTraining("non-finite feature or target".into()));
        }

        let base = if y.iter().all(|&v| v == y[0]) {
            y[0]
        } else {
            y.iter().sum::<f64>() / y.len() as f64
        };
        let mut residual: Vec<f64> = y.iter().map(|v| v - base).collect();
        let mut trace = Vec::with_capacity(params.n_rounds + 1);
        trace.push(mean_squared(&residual));
        let all_rows: Vec<usize> = (0..x.len()).collect();
        let mut rng = stream_rng(params.seed, 0);
        let n_sub = ((x.len() as f64 * params.row_subsample) as usize).max(2).min(x.len());
        let mut trees = Vec::with_capacity(params.n_rounds);
        for _ in 0..params.n_rounds {
            let rows = if n_sub < x.len() {
                let mut r = all_rows.clone();
                r.partial_shuffle(&mut rng, n_sub);
                r.truncate(n_sub);
                r.sort_unstable();
                r
            } else {
                all_rows.clone()
            };
            let tree = Builder {
                x,
                residual: &residual,
                params,
                dim,
            }
            .grow(&rows, 0);
            for (i, r) in residual.iter_mut().enumerate() {
                *r -= params.learning_rate * tree.eval(&x[i]);
            }
            trace.push(mean_squared(&residual));
            trees.push(tree);
        }
        Ok((
            MetaRegressor {
                base,
                lr: params.learning_rate,
                trees,
                params: params.clone(),
                feature_dim: dim,
            },
            trace,
        ))
    }

    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &GbtParams) -> Result<MetaRegressor> {
        Self::fit_traced(x, y, params).map(|(m, _)| m)
    }

    /// Unclamped ensemble output.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        Ok(self.base + self.trees.iter().map(|t| self.lr * t.eval(x)).sum::<f64>())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(clamp_ratio(self.predict_raw(x)?))
    }

    /// Checks the structural invariants of a (possibly deserialized) model.
    pub fn validate(&self) -> Result<()> {
        for t in &self.trees {
            if t.depth() > self.params.max_depth {
                return Err(Error::InvalidArgument(format!(
                    "tree depth {} exceeds max_depth {}",
                    t.depth(),
                    self.params.max_depth
                )));
            }
            if let Some(f) = t.max_feature() {
                if f >= self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        got: f + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn clamp_ratio(raw: f64) -> f64 {
    if raw.is_nan() {
        return 0.0;
    }
    raw.clamp(0.0, 1.0)
}
