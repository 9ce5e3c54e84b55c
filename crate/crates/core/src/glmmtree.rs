//! Model trees with per-patient random intercepts.
//!
//! Fitting alternates between growing a tree of local linear models on the
//! response adjusted for the current random intercepts, and refitting a
//! mixed model whose fixed effects are the leaf indicators crossed with
//! `(1, regressors)`. It stops when two successive trees have the same
//! split signature.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, HB_COLUMN};
use crate::linalg;
use crate::lmm::{Criterion, LmmError, LmmProblem, PredictMode};
use crate::sub_seed;
use crate::trees::{self, GrowInput, GrowParams, StopRule, Tree, TreeError};

#[derive(Debug, Error)]
pub enum GlmmTreeError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error("`{0}` is both a regressor and a partitioner")]
    Overlap(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("no usable rows (target, weight and regressors present)")]
    NoRows,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, GlmmTreeError>;

/// Leaf model `beta0 + beta1 · regressors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

impl NodeModel {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.beta0 + self.beta1.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn from_coefficients(c: &[f64]) -> Self {
        Self {
            beta0: c[0],
            beta1: c[1..].to_vec(),
        }
    }
}

/// Multiplicity correction applied to the split F-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCorrection {
    /// Divide the level by the number of partitioners.
    Partitioners,
    /// Also divide by the number of thresholds evaluated in the node.
    PartitionersAndThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmmTreeParams {
    pub min_node_size: usize,
    pub max_depth: usize,
    pub alpha_split: f64,
    pub correction: SplitCorrection,
    pub max_iter: usize,
    pub criterion: Criterion,
    /// Starting intercepts; zero for patients not listed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_random_effects: Option<BTreeMap<String, f64>>,
}

impl Default for GlmmTreeParams {
    fn default() -> Self {
        Self {
            min_node_size: 20,
            max_depth: 10,
            alpha_split: 0.05,
            correction: SplitCorrection::PartitionersAndThresholds,
            max_iter: 10,
            criterion: Criterion::Reml,
            initial_random_effects: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub signature: Vec<(String, f64)>,
    pub loglik: f64,
    pub n_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmTreeFit {
    pub tree: Tree<NodeModel>,
    pub regressors: Vec<String>,
    pub sigma2: f64,
    pub sigma_b2: f64,
    pub theta: f64,
    pub b_hat: BTreeMap<String, f64>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub n_iterations: usize,
    /// False when the trace log-likelihood decreased by more than 1e-6.
    pub loglik_monotone: bool,
    pub n_obs: usize,
}

impl GlmmTreeFit {
    pub fn partitioners(&self) -> &[String] {
        &self.tree.features
    }

    /// Node index of the leaf a point falls in.
    pub fn leaf_of(&self, value: &dyn Fn(&str) -> Option<f64>) -> usize {
        self.tree
            .route(|j| value(&self.tree.features[j]).unwrap_or(f64::NAN))
    }

    pub fn predict_point(
        &self,
        value: &dyn Fn(&str) -> Option<f64>,
        cluster: Option<&str>,
        mode: PredictMode,
    ) -> f64 {
        let model = self.tree.leaf_model(self.leaf_of(value));
        let regs: Vec<f64> = self
            .regressors
            .iter()
            .map(|r| value(r).unwrap_or(f64::NAN))
            .collect();
        let b = match (mode, cluster) {
            (PredictMode::Conditional, Some(c)) => self.b_hat.get(c).copied().unwrap_or(0.0),
            _ => 0.0,
        };
        model.eval(&regs) + b
    }
}

/// Point predictions from a fitted mixed tree model.
pub trait MixedPredictor {
    fn predict_point(
        &self,
        value: &dyn Fn(&str) -> Option<f64>,
        cluster: Option<&str>,
        mode: PredictMode,
    ) -> f64;

    /// Features the predictor reads.
    fn inputs(&self) -> Vec<String>;

    fn predict_dataset(&self, d: &Dataset, mode: PredictMode) -> Result<Vec<f64>> {
        let names = self.inputs();
        let cols = names
            .iter()
            .map(|n| {
                d.feature_index(n)
                    .map_err(|_| GlmmTreeError::UnknownFeature(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(d.records()
            .iter()
            .map(|r| {
                let value = |f: &str| {
                    names
                        .iter()
                        .position(|n| n == f)
                        .and_then(|k| r.features[cols[k]])
                };
                self.predict_point(&value, Some(&r.patient_id), mode)
            })
            .collect())
    }
}

impl MixedPredictor for GlmmTreeFit {
    fn predict_point(
        &self,
        value: &dyn Fn(&str) -> Option<f64>,
        cluster: Option<&str>,
        mode: PredictMode,
    ) -> f64 {
        GlmmTreeFit::predict_point(self, value, cluster, mode)
    }

    fn inputs(&self) -> Vec<String> {
        let mut v = self.tree.features.clone();
        v.extend(self.regressors.iter().cloned());
        v
    }
}

pub fn predict_glmm_tree(fit: &GlmmTreeFit, d: &Dataset, mode: PredictMode) -> Result<Vec<f64>> {
    fit.predict_dataset(d, mode)
}

/// Every schema feature other than the regressors and the tracked
/// hemoglobin level.
pub fn default_partitioners(schema: &[String], regressors: &[String]) -> Vec<String> {
    schema
        .iter()
        .filter(|f| !regressors.contains(f) && f.as_str() != HB_COLUMN)
        .cloned()
        .collect()
}

/// Numeric inputs for a fit, restricted to usable rows.
#[derive(Debug, Clone)]
struct Design {
    partition: DMatrix<f64>,
    regressors: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    clusters: Vec<String>,
}

impl Design {
    fn from_dataset(d: &Dataset, regressors: &[String], partitioners: &[String]) -> Result<Self> {
        for r in regressors {
            if partitioners.contains(r) {
                return Err(GlmmTreeError::Overlap(r.clone()));
            }
        }
        for f in regressors.iter().chain(partitioners) {
            if d.feature_index(f).is_err() {
                return Err(GlmmTreeError::UnknownFeature(f.clone()));
            }
        }
        let reg_idx: Vec<usize> = regressors.iter().map(|f| d.feature_index(f).unwrap()).collect();
        let usable = d.labelled().filter(|r| reg_idx.iter().all(|&j| r.features[j].is_some()));
        if usable.is_empty() {
            return Err(GlmmTreeError::NoRows);
        }
        Ok(Self {
            partition: usable.matrix(partitioners)?,
            regressors: usable.matrix(regressors)?,
            y: usable.targets(),
            w: usable.weights(),
            clusters: usable.patient_ids(),
        })
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn select(&self, rows: &[usize], clusters: Vec<String>) -> Self {
        Self {
            partition: self.partition.select_rows(rows.iter()),
            regressors: self.regressors.select_rows(rows.iter()),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            clusters,
        }
    }
}

fn check_params(p: &GlmmTreeParams) -> Result<()> {
    if p.max_iter == 0 {
        return Err(GlmmTreeError::InvalidParams("max_iter must be >= 1".into()));
    }
    if !(p.alpha_split > 0.0 && p.alpha_split <= 1.0) {
        return Err(GlmmTreeError::InvalidParams("alpha_split must be in (0, 1]".into()));
    }
    if p.min_node_size == 0 {
        return Err(GlmmTreeError::InvalidParams("min_node_size must be >= 1".into()));
    }
    Ok(())
}

pub fn fit_glmm_tree(
    d: &Dataset,
    regressors: &[String],
    partitioners: &[String],
    params: &GlmmTreeParams,
) -> Result<GlmmTreeFit> {
    check_params(params)?;
    let design = Design::from_dataset(d, regressors, partitioners)?;
    fit_design(&design, regressors, partitioners, params)
}

fn grow_params(params: &GlmmTreeParams, n_partitioners: usize) -> GrowParams {
    GrowParams {
        min_node_size: params.min_node_size,
        max_depth: params.max_depth,
        stop: StopRule::FTest {
            alpha: params.alpha_split,
            divisor: n_partitioners.max(1) as f64,
            per_candidate: params.correction == SplitCorrection::PartitionersAndThresholds,
        },
        mtry: None,
        seed: 0,
    }
}

fn leaf_rows(tree: &Tree<Vec<f64>>, partition: &DMatrix<f64>) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..partition.nrows() {
        out.entry(tree.route_row(partition, i)).or_default().push(i);
    }
    out
}

fn local_design(design: &Design, rows: &[usize]) -> DMatrix<f64> {
    let q = design.regressors.ncols() + 1;
    DMatrix::from_fn(rows.len(), q, |r, c| {
        if c == 0 {
            1.0
        } else {
            design.regressors[(rows[r], c - 1)]
        }
    })
}

fn fit_design(
    design: &Design,
    regressors: &[String],
    partitioners: &[String],
    params: &GlmmTreeParams,
) -> Result<GlmmTreeFit> {
    let n = design.n();
    let q = regressors.len() + 1;
    let mut b: BTreeMap<String, f64> = params.initial_random_effects.clone().unwrap_or_default();
    let gp = grow_params(params, partitioners.len());
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut converged = false;
    let mut last = None;
    for _ in 0..params.max_iter {
        let ystar: Vec<f64> = (0..n)
            .map(|i| design.y[i] - b.get(&design.clusters[i]).copied().unwrap_or(0.0))
            .collect();
        let tree = trees::grow(
            &GrowInput {
                partition: &design.partition,
                feature_names: partitioners,
                regressors: &design.regressors,
                y: &ystar,
                w: &design.w,
            },
            gp,
        )?;
        let leaves = leaf_rows(&tree, &design.partition);
        // leaf indicator × (1, regressors), dropping slopes a leaf cannot identify
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (leaf, rows) in &leaves {
            let x = local_design(design, rows);
            let w = DMatrix::from_fn(rows.len(), 1, |r, _| design.w[rows[r]]);
            let xtwx = x.transpose() * DMatrix::from_fn(rows.len(), q, |r, c| x[(r, c)] * w[(r, 0)]);
            let keep_slopes = linalg::is_well_conditioned(&xtwx);
            for c in 0..q {
                if c > 0 && !keep_slopes {
                    continue;
                }
                let mut col = vec![0.0; n];
                for (k, &i) in rows.iter().enumerate() {
                    col[i] = x[(k, c)];
                }
                cols.push(col);
                names.push(if c == 0 {
                    format!("leaf{leaf}:(Intercept)")
                } else {
                    format!("leaf{leaf}:{}", regressors[c - 1])
                });
            }
        }
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let fit = LmmProblem::new(&x, &design.y, &design.clusters, &design.w)?.fit(&names, params.criterion)?;
        let signature = tree.signature();
        let repeat = trace.last().is_some_and(|t: &TraceEntry| t.signature == signature);
        trace.push(TraceEntry {
            signature,
            loglik: fit.loglik,
            n_leaves: leaves.len(),
        });
        b = fit.b_hat.clone();
        last = Some((tree, fit));
        if repeat {
            converged = true;
            break;
        }
    }
    let (tree, fit) = last.expect("max_iter >= 1");
    let adjusted: Vec<f64> = (0..n)
        .map(|i| design.y[i] - fit.b_hat.get(&design.clusters[i]).copied().unwrap_or(0.0))
        .collect();
    let leaves = leaf_rows(&tree, &design.partition);
    let models: BTreeMap<usize, NodeModel> = leaves
        .iter()
        .map(|(leaf, rows)| {
            let x = local_design(design, rows);
            let y: Vec<f64> = rows.iter().map(|&i| adjusted[i]).collect();
            let w: Vec<f64> = rows.iter().map(|&i| design.w[i]).collect();
            (*leaf, NodeModel::from_coefficients(&trees::local_fit(&x, &y, &w)))
        })
        .collect();
    let tree = tree.map_leaves(|node, m| {
        models
            .get(&node)
            .cloned()
            .unwrap_or_else(|| NodeModel::from_coefficients(m))
    });
    let loglik_monotone = trace.windows(2).all(|p| p[1].loglik >= p[0].loglik - 1e-6);
    Ok(GlmmTreeFit {
        tree,
        regressors: regressors.to_vec(),
        sigma2: fit.sigma2,
        sigma_b2: fit.sigma_b2,
        theta: fit.theta,
        b_hat: fit.b_hat,
        n_iterations: trace.len(),
        trace,
        converged,
        loglik_monotone,
        n_obs: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaggedParams {
    pub n_trees: usize,
    /// Resample patients with replacement; off fits every member on all data.
    pub bootstrap: bool,
    pub seed: u64,
    pub tree: GlmmTreeParams,
}

impl Default for BaggedParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            bootstrap: true,
            seed: 0,
            tree: GlmmTreeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedGlmmTree {
    pub members: Vec<GlmmTreeFit>,
    pub params: BaggedParams,
}

impl MixedPredictor for BaggedGlmmTree {
    fn predict_point(
        &self,
        value: &dyn Fn(&str) -> Option<f64>,
        cluster: Option<&str>,
        mode: PredictMode,
    ) -> f64 {
        let s: f64 = self
            .members
            .iter()
            .map(|m| m.predict_point(value, cluster, mode))
            .sum();
        s / self.members.len() as f64
    }

    fn inputs(&self) -> Vec<String> {
        self.members[0].inputs()
    }
}

impl BaggedGlmmTree {
    pub fn member_predictions(&self, d: &Dataset, mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        self.members.iter().map(|m| m.predict_dataset(d, mode)).collect()
    }

    /// Pooled variance components, averaged over members.
    pub fn variances(&self) -> (f64, f64, BTreeMap<String, f64>) {
        let k = self.members.len() as f64;
        let sigma2 = self.members.iter().map(|m| m.sigma2).sum::<f64>() / k;
        let sigma_b2 = self.members.iter().map(|m| m.sigma_b2).sum::<f64>() / k;
        let mut b: BTreeMap<String, f64> = BTreeMap::new();
        for m in &self.members {
            for (id, v) in &m.b_hat {
                *b.entry(id.clone()).or_default() += v / k;
            }
        }
        (sigma2, sigma_b2, b)
    }
}

/// Recomputes a member's random intercepts for every training patient
/// from the full training data, holding its tree and variances fixed.
fn refresh_intercepts(member: &mut GlmmTreeFit, design: &Design) {
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for i in 0..design.n() {
        let value = |f: &str| {
            if let Some(j) = member.tree.features.iter().position(|n| n == f) {
                return Some(design.partition[(i, j)]);
            }
            member
                .regressors
                .iter()
                .position(|n| n == f)
                .map(|j| design.regressors[(i, j)])
        };
        let r = design.y[i] - member.predict_point(&value, None, PredictMode::Marginal);
        let e = sums.entry(design.clusters[i].as_str()).or_default();
        e.0 += design.w[i];
        e.1 += design.w[i] * r;
    }
    let theta = member.theta;
    member.b_hat = sums
        .into_iter()
        .map(|(id, (s, wr))| (id.to_string(), theta / (1.0 + theta * s) * wr))
        .collect();
}

/// Bagged mixed trees over patient-level bootstrap samples. A patient
/// drawn several times enters as distinct clusters. Member `k` draws from
/// `sub_seed(seed, k)`.
pub fn fit_bagged_glmm_tree(
    d: &Dataset,
    regressors: &[String],
    partitioners: &[String],
    params: &BaggedParams,
) -> Result<BaggedGlmmTree> {
    if params.n_trees == 0 {
        return Err(GlmmTreeError::InvalidParams("n_trees must be >= 1".into()));
    }
    check_params(&params.tree)?;
    let design = Design::from_dataset(d, regressors, partitioners)?;
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in design.clusters.iter().enumerate() {
        by_patient.entry(c.as_str()).or_default().push(i);
    }
    let patients: Vec<(&str, Vec<usize>)> = by_patient.into_iter().collect();
    let members = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut member = if params.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(params.seed, k as u64));
                let mut rows = Vec::new();
                let mut clusters = Vec::new();
                for draw in 0..patients.len() {
                    let (id, idx) = &patients[rng.random_range(0..patients.len())];
                    rows.extend_from_slice(idx);
                    clusters.extend(std::iter::repeat_n(format!("{id}#{draw}"), idx.len()));
                }
                let sample = design.select(&rows, clusters);
                fit_design(&sample, regressors, partitioners, &params.tree)?
            } else {
                fit_design(&design, regressors, partitioners, &params.tree)?
            };
            if params.bootstrap {
                refresh_intercepts(&mut member, &design);
            }
            Ok(member)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaggedGlmmTree {
        members,
        params: params.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DosePoint {
    pub dose: f64,
    pub delta_hb: f64,
    pub projected_hb: f64,
}

/// Conditional ΔHb and projected Hb over a grid of doses written into
/// `dose_feature`, all other inputs taken from `value`.
pub fn dose_response(
    model: &dyn MixedPredictor,
    value: &dyn Fn(&str) -> Option<f64>,
    cluster: Option<&str>,
    dose_feature: &str,
    current_hb: f64,
    grid: &[f64],
) -> Result<Vec<DosePoint>> {
    if grid.is_empty() || grid.iter().any(|d| !d.is_finite()) {
        return Err(GlmmTreeError::InvalidParams("dose grid must be finite and non-empty".into()));
    }
    if !model.inputs().iter().any(|f| f == dose_feature) {
        return Err(GlmmTreeError::UnknownFeature(dose_feature.into()));
    }
    Ok(grid
        .iter()
        .map(|&dose| {
            let at = |f: &str| if f == dose_feature { Some(dose) } else { value(f) };
            let delta_hb = model.predict_point(&at, cluster, PredictMode::Conditional);
            DosePoint {
                dose,
                delta_hb,
                projected_hb: current_hb + delta_hb,
            }
        })
        .collect())
}
