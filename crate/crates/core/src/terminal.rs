//! Collapse prediction: a small gradient-boosted tree ensemble on
//! `(state, action)` features, fitted to a class-balanced set of random-policy
//! transitions.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GridModel, ResetMode};
use crate::error::{Error, Result};
use crate::grid::{Action, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
    pub colsample: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    pub min_child_weight: f64,
    pub base_score: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_estimators: 2,
            max_depth: 5,
            learning_rate: 1.0,
            subsample: 0.8658,
            colsample: 1.0,
            lambda: 1.0,
            min_child_weight: 1.0,
            base_score: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Indices into the tree's node list; `x[feature] < threshold` goes left.
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn eval(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { leaf } => return leaf,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary log-loss at margin `z` with its first and second derivative in `z`.
pub fn logistic_loss(z: f64, label: bool) -> (f64, f64, f64) {
    let p = sigmoid(z);
    let y = if label { 1.0 } else { 0.0 };
    // log(1 + e^z) - y z, written to stay finite for large |z|
    let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
    (loss, p - y, p * (1.0 - p))
}

impl GbtModel {
    fn base_margin(&self) -> f64 {
        let p = self.params.base_score;
        (p / (1.0 - p)).ln()
    }

    pub fn margin(&self, x: ArrayView1<f64>) -> f64 {
        self.trees.iter().fold(self.base_margin(), |m, t| m + t.eval(x))
    }

    /// Collapse probability and the label at threshold 0.5.
    pub fn predict(&self, x: ArrayView1<f64>) -> (f64, bool) {
        let p = sigmoid(self.margin(x));
        (p, p >= 0.5)
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Vec<bool> {
        x.rows().into_iter().map(|r| self.predict(r).1).collect()
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[bool]) -> f64 {
        let hits = self.predict_batch(x).iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: GbtModel = serde_json::from_str(text).map_err(|e| Error::Parse(format!("tree dump: {e}")))?;
        for t in &m.trees {
            if t.nodes.is_empty() {
                return Err(Error::invariant("tree", "empty node list"));
            }
            for n in &t.nodes {
                if let Node::Split { left, right, feature, .. } = *n {
                    if left >= t.nodes.len() || right >= t.nodes.len() || feature >= m.n_features {
                        return Err(Error::invariant("tree", "node index out of range"));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    features: Vec<usize>,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda) * self.params.learning_rate
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            leaf: self.leaf_weight(g, h),
        });
        if depth == self.params.max_depth || rows.len() < 2 {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows, g, h) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[(i, feature)] < threshold);
        let left = self.build(&l, depth + 1);
        let right = self.build(&r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Exact greedy search over every unique value of every feature.
    fn best_split(&self, rows: &[usize], g: f64, h: f64) -> Option<(usize, f64)> {
        let parent = self.score(g, h);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for &f in &self.features {
            sorted.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..sorted.len() - 1 {
                let i = sorted[w];
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (self.x[(i, f)], self.x[(sorted[w + 1], f)]);
                if lo == hi {
                    continue;
                }
                let hr = h - hl;
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(g - gl, hr) - parent;
                if gain > 0.0 && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, f, 0.5 * (lo + hi)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Boosting on the logistic loss with second-order leaf weights.
pub fn fit_gbt(x: ArrayView2<f64>, y: &[bool], params: &GbtParams) -> Result<GbtModel> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Dataset(format!("{} feature rows for {} labels", x.nrows(), y.len())));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::Dataset("single-class dataset".into()));
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) || !(0.0 < params.base_score && params.base_score < 1.0) {
        return Err(Error::invariant("gbt params", "subsample in (0, 1], base_score in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut model = GbtModel {
        params: *params,
        n_features: x.ncols(),
        trees: Vec::with_capacity(params.n_estimators),
    };
    let mut margin = vec![model.base_margin(); x.nrows()];
    let n_cols = ((params.colsample * x.ncols() as f64).round() as usize).clamp(1, x.ncols());
    for _ in 0..params.n_estimators {
        let mut grad = vec![0.0; x.nrows()];
        let mut hess = vec![0.0; x.nrows()];
        for i in 0..x.nrows() {
            let (_, g, h) = logistic_loss(margin[i], y[i]);
            grad[i] = g;
            hess[i] = h.max(1e-16);
        }
        let mut rows: Vec<usize> = (0..x.nrows()).collect();
        rows.shuffle(&mut rng);
        rows.truncate(((params.subsample * x.nrows() as f64).round() as usize).max(1));
        rows.sort_unstable();
        let mut features: Vec<usize> = (0..x.ncols()).collect();
        if n_cols < x.ncols() {
            features.shuffle(&mut rng);
            features.truncate(n_cols);
            features.sort_unstable();
        }
        let mut b = Builder {
            x,
            grad: &grad,
            hess: &hess,
            params,
            features,
            nodes: Vec::new(),
        };
        b.build(&rows, 0);
        let tree = Tree { nodes: b.nodes };
        for (i, m) in margin.iter_mut().enumerate() {
            *m += tree.eval(x.row(i));
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Labeled `(state, action)` rows; `y[i]` is true when the transition collapses the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDataset {
    pub x: Array2<f64>,
    pub y: Vec<bool>,
    /// Oracle steps simulated to collect the rows.
    pub steps: usize,
    pub collapse_rate: f64,
}

impl TerminalDataset {
    pub fn terminal_fraction(&self) -> f64 {
        self.y.iter().filter(|&&v| v).count() as f64 / self.y.len().max(1) as f64
    }

    /// Deterministic shuffled split; the first part holds `1 - test_frac` of the rows.
    pub fn split(&self, test_frac: f64, seed: u64) -> (TerminalDataset, TerminalDataset) {
        let mut idx: Vec<usize> = (0..self.y.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_frac * idx.len() as f64).round() as usize;
        let take = |ids: &[usize]| TerminalDataset {
            x: self.x.select(ndarray::Axis(0), ids),
            y: ids.iter().map(|&i| self.y[i]).collect(),
            steps: self.steps,
            collapse_rate: self.collapse_rate,
        };
        let (test, train) = idx.split_at(n_test);
        (take(train), take(test))
    }
}

/// Feature vector of a transition: the flat state followed by the flat action.
pub fn terminal_features(state: &[f64], action: &[f64]) -> Vec<f64> {
    state.iter().chain(action).copied().collect()
}

/// Uniform-random-policy rollouts until `target / 2` collapses are seen. All
/// collapses are kept; the non-terminal half is a uniform reservoir sample of
/// everything else.
pub fn build_terminal_dataset(spec: &NetworkSpec, target: usize, horizon: usize, seed: u64) -> Result<TerminalDataset> {
    if target < 2 {
        return Err(Error::invariant("target", "need at least 2 rows"));
    }
    let model = GridModel::new(std::sync::Arc::new(spec.clone()));
    let (lo, hi) = spec.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_term = target / 2;
    let n_safe = target - n_term;
    let max_steps = 2000 * target;
    let mut terminal: Vec<Vec<f64>> = Vec::with_capacity(n_term);
    let mut safe: Vec<Vec<f64>> = Vec::with_capacity(n_safe);
    let mut seen_safe = 0usize;
    let mut steps = 0usize;
    let mut episode = 0u64;
    while terminal.len() < n_term {
        let mut state = model.reset(ResetMode::UniformRandom, seed.wrapping_add(episode));
        episode += 1;
        for _ in 0..horizon {
            if steps >= max_steps {
                return Err(Error::Dataset(format!(
                    "{} collapses in {steps} steps (rate {:.2e}); widen the action ranges or load the network harder",
                    terminal.len(),
                    terminal.len() as f64 / steps as f64
                )));
            }
            let a: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
            let action = Action::decode(spec, &a)?;
            let res = model.step(&state, &action)?;
            steps += 1;
            let row = terminal_features(&state.encode(), &a);
            if res.done {
                terminal.push(row);
                break;
            }
            seen_safe += 1;
            if safe.len() < n_safe {
                safe.push(row);
            } else {
                let j = rng.random_range(0..seen_safe);
                if j < n_safe {
                    safe[j] = row;
                }
            }
            state = res.next_state;
        }
    }
    let n_feat = terminal[0].len();
    let mut x = Array2::zeros((target, n_feat));
    let mut y = Vec::with_capacity(target);
    for (i, row) in terminal.iter().chain(&safe).enumerate() {
        x.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        y.push(i < terminal.len());
    }
    Ok(TerminalDataset {
        x,
        y,
        steps,
        collapse_rate: terminal.len() as f64 / steps as f64,
    })
}
