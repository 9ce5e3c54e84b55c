//! Regression trees: CART, bagged forests, and the split engine reused by
//! the model-based trees in [`crate::glmmtree`].
//!
//! A node's local model is weighted least squares on `(1, regressors)`.
//! With no regressors this is the weighted mean and the engine is plain
//! CART. Splits are searched exhaustively over midpoints between
//! consecutive distinct values; rows with a missing split value follow the
//! child that received more non-missing training rows (left on ties). A row
//! with `x == threshold` goes left.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::linalg;
pub use crate::rules::Op;
use crate::sub_seed;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("no rows to fit")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, TreeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<L> {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        missing_left: bool,
        n: usize,
    },
    Leaf {
        model: L,
        n: usize,
        weight: f64,
    },
}

/// Binary tree in an arena; node 0 is the root, children follow their
/// parent in depth-first (left first) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<L> {
    pub features: Vec<String>,
    pub nodes: Vec<Node<L>>,
}

impl<L> Tree<L> {
    /// Node index of the leaf reached by a row; `value(j)` returns the
    /// row's value for feature `j` (`NaN` when missing).
    pub fn route(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    missing_left,
                    ..
                } => {
                    let v = value(*feature);
                    at = if v.is_nan() {
                        if *missing_left {
                            *left
                        } else {
                            *right
                        }
                    } else if v <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    /// Routes row `i` of a matrix whose columns follow `self.features`.
    pub fn route_row(&self, x: &DMatrix<f64>, i: usize) -> usize {
        self.route(|j| x[(i, j)])
    }

    pub fn leaf_model(&self, node: usize) -> &L {
        match &self.nodes[node] {
            Node::Leaf { model, .. } => model,
            Node::Split { .. } => panic!("node {node} is not a leaf"),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        self.paths().iter().map(|(_, p)| p.len()).max().unwrap_or(0)
    }

    /// Leaves in depth-first order with the conditions leading to them.
    pub fn paths(&self) -> Vec<(usize, Vec<(usize, Op, f64)>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((at, path)) = stack.pop() {
            match &self.nodes[at] {
                Node::Leaf { .. } => out.push((at, path)),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let mut r = path.clone();
                    r.push((*feature, Op::Gt, *threshold));
                    stack.push((*right, r));
                    let mut l = path;
                    l.push((*feature, Op::Le, *threshold));
                    stack.push((*left, l));
                }
            }
        }
        out
    }

    /// Split features and thresholds in depth-first order; two trees with
    /// equal signatures partition the space identically.
    pub fn signature(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } = &self.nodes[at]
            {
                out.push((self.features[*feature].clone(), *threshold));
                stack.push(*right);
                stack.push(*left);
            }
        }
        out
    }

    pub fn map_leaves<M>(&self, mut f: impl FnMut(usize, &L) -> M) -> Tree<M> {
        Tree {
            features: self.features.clone(),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| match n {
                    Node::Leaf { model, n, weight } => Node::Leaf {
                        model: f(i, model),
                        n: *n,
                        weight: *weight,
                    },
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        missing_left,
                        n,
                    } => Node::Split {
                        feature: *feature,
                        threshold: *threshold,
                        left: *left,
                        right: *right,
                        missing_left: *missing_left,
                        n: *n,
                    },
                })
                .collect(),
        }
    }
}

/// How growth decides whether the best split is worth keeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Keep when the SSE reduction is at least `cp` times the root SSE.
    Cp(f64),
    /// Keep when the F-test of the two-child model against the parent
    /// model has `p * divisor < alpha`. `per_candidate` additionally
    /// multiplies by the number of thresholds evaluated for the node.
    FTest {
        alpha: f64,
        divisor: f64,
        per_candidate: bool,
    },
}

/// Inputs to the split engine.
pub struct GrowInput<'a> {
    /// `n × P` partitioning features, `NaN` for missing.
    pub partition: &'a DMatrix<f64>,
    pub feature_names: &'a [String],
    /// `n × R` regressors of the local model (may have zero columns).
    pub regressors: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub w: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowParams {
    pub min_node_size: usize,
    pub max_depth: usize,
    pub stop: StopRule,
    /// Features sampled per split; `None` uses all.
    pub mtry: Option<usize>,
    pub seed: u64,
}

/// Sufficient statistics of weighted least squares on centered data.
#[derive(Clone)]
struct LsStats {
    q: usize,
    count: usize,
    xtwx: Vec<f64>,
    xtwy: Vec<f64>,
    ytwy: f64,
}

impl LsStats {
    fn new(q: usize) -> Self {
        Self {
            q,
            count: 0,
            xtwx: vec![0.0; q * q],
            xtwy: vec![0.0; q],
            ytwy: 0.0,
        }
    }

    fn add(&mut self, z: &[f64], y: f64, w: f64, sign: f64) {
        let q = self.q;
        if sign > 0.0 {
            self.count += 1;
        } else {
            self.count -= 1;
        }
        let sw = sign * w;
        for a in 0..q {
            let za = sw * z[a];
            self.xtwy[a] += za * y;
            for b in 0..q {
                self.xtwx[a * q + b] += za * z[b];
            }
        }
        self.ytwy += sw * y * y;
    }

    fn combine(&mut self, a: &LsStats, b: &LsStats, sign: f64) {
        self.count = if sign > 0.0 {
            a.count + b.count
        } else {
            a.count - b.count
        };
        for k in 0..self.xtwx.len() {
            self.xtwx[k] = a.xtwx[k] + sign * b.xtwx[k];
        }
        for k in 0..self.q {
            self.xtwy[k] = a.xtwy[k] + sign * b.xtwy[k];
        }
        self.ytwy = a.ytwy + sign * b.ytwy;
    }

    /// Residual sum of squares of the local fit, `None` if singular.
    fn sse(&self, scratch_a: &mut [f64], scratch_b: &mut [f64]) -> Option<f64> {
        if self.count <= self.q - 1 || self.xtwx[0] <= 0.0 {
            return None;
        }
        scratch_a.copy_from_slice(&self.xtwx);
        scratch_b.copy_from_slice(&self.xtwy);
        if !linalg::small_spd_solve(scratch_a, scratch_b, self.q) {
            return None;
        }
        let fitted: f64 = scratch_b.iter().zip(&self.xtwy).map(|(b, r)| b * r).sum();
        Some((self.ytwy - fitted).max(0.0))
    }
}

struct Engine<'a> {
    input: &'a GrowInput<'a>,
    params: GrowParams,
    /// centered local design rows `(1, r - r̄)`, row-major `n × q`
    z: Vec<f64>,
    /// centered response
    yc: Vec<f64>,
    q: usize,
    root_sse: f64,
    rng: ChaCha8Rng,
    nodes: Vec<Node<Vec<f64>>>,
    scratch_a: Vec<f64>,
    scratch_b: Vec<f64>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    missing_left: bool,
    sse_children: f64,
    n_candidates: usize,
}

impl<'a> Engine<'a> {
    fn stats(&self, rows: &[usize]) -> LsStats {
        let mut s = LsStats::new(self.q);
        for &i in rows {
            s.add(&self.z[i * self.q..(i + 1) * self.q], self.yc[i], self.input.w[i], 1.0);
        }
        s
    }

    fn sse(&mut self, s: &LsStats) -> Option<f64> {
        s.sse(&mut self.scratch_a, &mut self.scratch_b)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let at = self.nodes.len();
        // placeholder; replaced below
        self.nodes.push(Node::Leaf {
            model: Vec::new(),
            n: rows.len(),
            weight: 0.0,
        });
        let split = self.best_split(&rows, depth);
        match split {
            None => {
                self.nodes[at] = self.leaf(&rows);
            }
            Some(c) => {
                let mut left_rows = Vec::new();
                let mut right_rows = Vec::new();
                for &i in &rows {
                    let v = self.input.partition[(i, c.feature)];
                    let go_left = if v.is_nan() { c.missing_left } else { v <= c.threshold };
                    if go_left {
                        left_rows.push(i);
                    } else {
                        right_rows.push(i);
                    }
                }
                let n = rows.len();
                drop(rows);
                let left = self.grow(left_rows, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                self.nodes[at] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                    missing_left: c.missing_left,
                    n,
                };
            }
        }
        at
    }

    fn leaf(&self, rows: &[usize]) -> Node<Vec<f64>> {
        let w: Vec<f64> = rows.iter().map(|&i| self.input.w[i]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| self.input.y[i]).collect();
        let weight: f64 = w.iter().sum();
        let model = if self.q == 1 {
            vec![w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / weight]
        } else {
            let x = DMatrix::from_fn(rows.len(), self.q, |r, c| {
                if c == 0 {
                    1.0
                } else {
                    self.input.regressors[(rows[r], c - 1)]
                }
            });
            local_fit(&x, &y, &w)
        };
        Node::Leaf {
            model,
            n: rows.len(),
            weight,
        }
    }

    fn best_split(&mut self, rows: &[usize], depth: usize) -> Option<Candidate> {
        let min = self.params.min_node_size.max(1);
        if depth >= self.params.max_depth || rows.len() < 2 * min || rows.len() < 2 * self.q {
            return None;
        }
        let total = self.stats(rows);
        let parent_sse = self.sse(&total)?;
        if parent_sse <= 1e-12 * self.root_sse || parent_sse == 0.0 {
            return None;
        }
        let p = self.input.partition.ncols();
        let features: Vec<usize> = match self.params.mtry {
            Some(m) if m < p => {
                let mut f = sample(&mut self.rng, p, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        };
        let tie = 1e-12 * parent_sse;
        let mut best: Option<Candidate> = None;
        let mut left;
        let mut side_l = LsStats::new(self.q);
        let mut side_r = LsStats::new(self.q);
        let mut tmp = LsStats::new(self.q);
        let mut n_candidates = 0;
        for &f in &features {
            let mut present: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
            let mut missing: Vec<usize> = Vec::new();
            for &i in rows {
                let v = self.input.partition[(i, f)];
                if v.is_nan() {
                    missing.push(i);
                } else {
                    present.push((v, i));
                }
            }
            present.sort_by(|a, b| a.0.total_cmp(&b.0));
            let miss = self.stats(&missing);
            let nonmissing = self.stats(&present.iter().map(|p| p.1).collect::<Vec<_>>());
            left = LsStats::new(self.q);
            let m = present.len();
            for k in 0..m.saturating_sub(1) {
                let (v, i) = present[k];
                left.add(&self.z[i * self.q..(i + 1) * self.q], self.yc[i], self.input.w[i], 1.0);
                let next = present[k + 1].0;
                if v == next {
                    continue;
                }
                let nl = k + 1;
                let nr = m - nl;
                let missing_left = nl >= nr;
                let (cl, cr) = if missing_left {
                    (nl + missing.len(), nr)
                } else {
                    (nl, nr + missing.len())
                };
                if cl < min || cr < min {
                    continue;
                }
                n_candidates += 1;
                tmp.combine(&nonmissing, &left, -1.0);
                if missing_left {
                    side_l.combine(&left, &miss, 1.0);
                    side_r.clone_from(&tmp);
                } else {
                    side_l.clone_from(&left);
                    side_r.combine(&tmp, &miss, 1.0);
                }
                let (Some(sl), Some(sr)) = (self.sse(&side_l), self.sse(&side_r)) else {
                    continue;
                };
                let gain = parent_sse - sl - sr;
                if best.as_ref().is_none_or(|b| gain > b.gain + tie) {
                    let mut threshold = 0.5 * (v + next);
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some(Candidate {
                        feature: f,
                        threshold,
                        gain,
                        missing_left,
                        sse_children: sl + sr,
                        n_candidates: 0,
                    });
                }
            }
        }
        let mut best = best?;
        best.n_candidates = n_candidates;
        self.accept(best, parent_sse, rows.len())
    }

    fn accept(&self, c: Candidate, parent_sse: f64, n: usize) -> Option<Candidate> {
        let slack = 1e-12 * self.root_sse;
        match self.params.stop {
            StopRule::Cp(cp) => {
                if c.gain < cp * self.root_sse - slack {
                    return None;
                }
            }
            StopRule::FTest {
                alpha,
                divisor,
                per_candidate,
            } => {
                let q = self.q as f64;
                let df2 = n as f64 - 2.0 * q;
                if df2 <= 0.0 || c.gain <= 0.0 {
                    return None;
                }
                let p_value = if c.sse_children <= 0.0 {
                    0.0
                } else {
                    let f = (c.gain / q) / (c.sse_children / df2);
                    FisherSnedecor::new(q, df2).ok()?.sf(f)
                };
                let mut m = divisor;
                if per_candidate {
                    m *= c.n_candidates.max(1) as f64;
                }
                if !(p_value * m < alpha) {
                    return None;
                }
            }
        }
        let _ = parent_sse;
        Some(c)
    }
}

/// Weighted least squares with a minimum-norm fallback for singular designs.
pub fn local_fit(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    if let Some(b) = linalg::wls(x, y, w) {
        return b.iter().copied().collect();
    }
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * sw[i]);
    let ys = DVector::from_iterator(y.len(), y.iter().zip(&sw).map(|(a, b)| a * b));
    xs.svd(true, true)
        .solve(&ys, 1e-10)
        .map(|b| b.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; x.ncols()])
}

/// Grows a tree whose leaves hold local least-squares coefficients
/// (intercept first).
pub fn grow(input: &GrowInput<'_>, params: GrowParams) -> Result<Tree<Vec<f64>>> {
    let n = input.y.len();
    if input.partition.nrows() != n
        || input.regressors.nrows() != n
        || input.w.len() != n
        || input.feature_names.len() != input.partition.ncols()
    {
        return Err(TreeError::DimensionMismatch(format!(
            "partition {}x{}, regressors {} rows, y {}, w {}, names {}",
            input.partition.nrows(),
            input.partition.ncols(),
            input.regressors.nrows(),
            n,
            input.w.len(),
            input.feature_names.len()
        )));
    }
    if let Some(m) = params.mtry {
        if m == 0 || m > input.partition.ncols().max(1) {
            return Err(TreeError::InvalidParams(format!(
                "mtry {m} outside [1, {}]",
                input.partition.ncols()
            )));
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| input.w[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(TreeError::Empty);
    }
    let q = input.regressors.ncols() + 1;
    let sw: f64 = rows.iter().map(|&i| input.w[i]).sum();
    let ybar = rows.iter().map(|&i| input.w[i] * input.y[i]).sum::<f64>() / sw;
    let rbar: Vec<f64> = (0..q - 1)
        .map(|j| rows.iter().map(|&i| input.w[i] * input.regressors[(i, j)]).sum::<f64>() / sw)
        .collect();
    let mut z = vec![0.0; n * q];
    for i in 0..n {
        z[i * q] = 1.0;
        for j in 0..q - 1 {
            z[i * q + j + 1] = input.regressors[(i, j)] - rbar[j];
        }
    }
    let yc: Vec<f64> = input.y.iter().map(|v| v - ybar).collect();
    let mut engine = Engine {
        input,
        params,
        z,
        yc,
        q,
        root_sse: 0.0,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        nodes: Vec::new(),
        scratch_a: vec![0.0; q * q],
        scratch_b: vec![0.0; q],
    };
    let root = engine.stats(&rows);
    engine.root_sse = engine.sse(&root).unwrap_or(0.0);
    engine.grow(rows, 0);
    Ok(Tree {
        features: input.feature_names.to_vec(),
        nodes: engine.nodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub min_node_size: usize,
    pub max_depth: usize,
    pub cp: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            min_node_size: 20,
            max_depth: 10,
            cp: 0.001,
        }
    }
}

/// A CART regression tree with constant leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub tree: Tree<f64>,
    pub params: TreeParams,
}

impl RegressionTree {
    pub fn predict_row(&self, value: impl Fn(usize) -> f64) -> f64 {
        *self.tree.leaf_model(self.tree.route(value))
    }
}

fn check_xy(x: &DMatrix<f64>, names: &[String], y: &[f64], w: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || w.len() != y.len() || names.len() != x.ncols() {
        return Err(TreeError::DimensionMismatch(format!(
            "X {}x{}, names {}, y {}, w {}",
            x.nrows(),
            x.ncols(),
            names.len(),
            y.len(),
            w.len()
        )));
    }
    if y.is_empty() {
        return Err(TreeError::Empty);
    }
    Ok(())
}

fn fit_cart_with(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    w: &[f64],
    params: TreeParams,
    mtry: Option<usize>,
    seed: u64,
) -> Result<RegressionTree> {
    check_xy(x, names, y, w)?;
    let none = DMatrix::<f64>::zeros(y.len(), 0);
    let grown = grow(
        &GrowInput {
            partition: x,
            feature_names: names,
            regressors: &none,
            y,
            w,
        },
        GrowParams {
            min_node_size: params.min_node_size,
            max_depth: params.max_depth,
            stop: StopRule::Cp(params.cp),
            mtry,
            seed,
        },
    )?;
    Ok(RegressionTree {
        tree: grown.map_leaves(|_, m| m[0]),
        params,
    })
}

/// Greedy CART growth maximising weighted SSE reduction.
pub fn fit_cart(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    w: &[f64],
    params: TreeParams,
) -> Result<RegressionTree> {
    fit_cart_with(x, names, y, w, params, None, 0)
}

/// Predictions for rows of `x`, whose columns follow `t.tree.features`.
pub fn predict_tree(t: &RegressionTree, x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| *t.tree.leaf_model(t.tree.route_row(x, i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `max(1, p / 3)`.
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub max_depth: usize,
    pub cp: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_node_size: 5,
            max_depth: 20,
            cp: 0.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<RegressionTree>,
    pub params: ForestParams,
}

impl Forest {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut sum = vec![0.0; x.nrows()];
        for t in &self.trees {
            for (s, p) in sum.iter_mut().zip(predict_tree(t, x)) {
                *s += p;
            }
        }
        let k = self.trees.len() as f64;
        sum.iter().map(|s| s / k).collect()
    }

    pub fn member_predictions(&self, x: &DMatrix<f64>) -> Vec<Vec<f64>> {
        self.trees.iter().map(|t| predict_tree(t, x)).collect()
    }
}

/// Bagged CART with per-split feature subsampling. Member `k` draws its
/// bootstrap sample and feature subsets from `sub_seed(seed, k)`, so the
/// forest does not depend on thread scheduling.
pub fn fit_forest(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    w: &[f64],
    params: ForestParams,
) -> Result<Forest> {
    check_xy(x, names, y, w)?;
    let p = x.ncols();
    if params.n_trees == 0 {
        return Err(TreeError::InvalidParams("n_trees must be >= 1".into()));
    }
    let mtry = params.mtry.unwrap_or((p / 3).max(1));
    if mtry == 0 || mtry > p {
        return Err(TreeError::InvalidParams(format!("mtry {mtry} outside [1, {p}]")));
    }
    let tree_params = TreeParams {
        min_node_size: params.min_node_size,
        max_depth: params.max_depth,
        cp: params.cp,
    };
    let n = y.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let seed = sub_seed(params.seed, k as u64);
            if !params.bootstrap {
                return fit_cart_with(x, names, y, w, tree_params, Some(mtry), seed);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let xb = x.select_rows(idx.iter());
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let wb: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            fit_cart_with(&xb, names, &yb, &wb, tree_params, Some(mtry), rng.random())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest { trees, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn constant_target_single_leaf() {
        let x = DMatrix::from_fn(100, 2, |i, j| (i * (j + 1)) as f64);
        let t = fit_cart(&x, &names(2), &[2.5; 100], &[1.0; 100], TreeParams::default()).unwrap();
        assert_eq!(t.tree.n_leaves(), 1);
        assert!(predict_tree(&t, &x).iter().all(|&p| p == 2.5));
    }

    #[test]
    fn empty_data_rejected() {
        let x = DMatrix::<f64>::zeros(0, 1);
        assert_eq!(
            fit_cart(&x, &names(1), &[], &[], TreeParams::default()).unwrap_err(),
            TreeError::Empty
        );
    }

    #[test]
    fn threshold_tie_goes_left() {
        let x = DMatrix::from_fn(40, 1, |i, _| if i < 20 { 0.0 } else { 1.0 });
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 5.0 }).collect();
        let t = fit_cart(&x, &names(1), &y, &[1.0; 40], TreeParams::default()).unwrap();
        let Node::Split { threshold, .. } = t.tree.nodes[0] else {
            panic!("expected a split")
        };
        assert_eq!(threshold, 0.5);
        let at = DMatrix::from_element(1, 1, threshold);
        assert_eq!(predict_tree(&t, &at), vec![0.0]);
    }

    #[test]
    fn missing_values_follow_larger_child() {
        // 30 rows left of the split, 20 right, plus 5 missing
        let mut v: Vec<f64> = (0..50).map(|i| if i < 30 { 0.0 } else { 1.0 }).collect();
        v.extend([f64::NAN; 5]);
        let y: Vec<f64> = (0..55).map(|i| if (30..50).contains(&i) { 4.0 } else { 0.0 }).collect();
        let x = DMatrix::from_column_slice(55, 1, &v);
        let t = fit_cart(&x, &names(1), &y, &[1.0; 55], TreeParams::default()).unwrap();
        let Node::Split {
            missing_left, left, right, ..
        } = t.tree.nodes[0]
        else {
            panic!("expected a split")
        };
        let n_of = |i: usize| match &t.tree.nodes[i] {
            Node::Leaf { n, .. } | Node::Split { n, .. } => *n,
        };
        assert!(missing_left);
        assert_eq!((n_of(left), n_of(right)), (35, 20));
        let row = DMatrix::from_element(1, 1, f64::NAN);
        assert_eq!(predict_tree(&t, &row), vec![0.0]);
    }

    #[test]
    fn leaf_values_are_weighted_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0f64..1.0));
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() * 3.0 + rng.random_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let t = fit_cart(&x, &names(2), &y, &w, TreeParams::default()).unwrap();
        let mut sums = vec![(0.0, 0.0); t.tree.nodes.len()];
        for i in 0..n {
            let leaf = t.tree.route_row(&x, i);
            sums[leaf].0 += w[i] * y[i];
            sums[leaf].1 += w[i];
        }
        for (k, node) in t.tree.nodes.iter().enumerate() {
            if let Node::Leaf { model, .. } = node {
                assert!((model - sums[k].0 / sums[k].1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mtry_out_of_range_rejected() {
        let x = DMatrix::from_element(10, 2, 1.0);
        let params = ForestParams {
            mtry: Some(3),
            n_trees: 2,
            ..Default::default()
        };
        assert!(matches!(
            fit_forest(&x, &names(2), &[0.0; 10], &[1.0; 10], params),
            Err(TreeError::InvalidParams(_))
        ));
    }
}
