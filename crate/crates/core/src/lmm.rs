//! Random-intercept linear mixed models.
//!
//! `y = Xβ + b[cluster] + ε`, `b ~ N(0, σ_b²)`, `ε_j ~ N(0, σ²/w_j)`.
//! With `θ = σ_b²/σ²` the marginal covariance of cluster `i` is
//! `σ² (W_i⁻¹ + θ 11ᵀ)`, whose inverse and determinant have closed forms,
//! so both β and σ² profile out and the (restricted) likelihood becomes a
//! function of θ alone. It is maximised over `log θ` by a coarse grid scan
//! followed by Brent refinement.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::cluster_index;
use crate::linalg;

/// Search interval for θ.
pub const THETA_MIN: f64 = 1e-8;
pub const THETA_MAX: f64 = 1e8;
/// Absolute tolerance on `log θ`.
pub const LOG_THETA_TOL: f64 = 1e-8;

/// Column name used for the implicit intercept in [`forward_select`].
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Error, PartialEq)]
pub enum LmmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {needed} rows with positive weight, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no candidate features")]
    NoCandidates,
    #[error("column mismatch: expected {expected:?}, got {got:?}")]
    ColumnMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, LmmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Ml,
    #[default]
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    #[default]
    Conditional,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub sigma_b2: f64,
    pub theta: f64,
    pub b_hat: BTreeMap<String, f64>,
    pub loglik: f64,
    pub criterion: Criterion,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// θ̂ was truncated at zero.
    pub boundary: bool,
    /// Fewer than two clusters: σ_b² fixed at zero.
    pub single_cluster: bool,
    /// Residuals vanish; σ² is set to a positive floor.
    pub exact_fit: bool,
}

impl LmmFit {
    /// Shrinkage weight `s_i θ / (s_i θ + 1)` for a cluster with total
    /// weight `s_i` (the visit count when unweighted).
    pub fn shrinkage(&self, cluster_weight: f64) -> f64 {
        cluster_weight * self.theta / (cluster_weight * self.theta + 1.0)
    }
}

/// Profiled likelihood at a fixed θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub theta: f64,
    pub beta: DVector<f64>,
    pub rss: f64,
    pub sigma2: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
struct ClusterStats {
    /// total weight
    s: f64,
    /// Xᵀw over the cluster
    u: DVector<f64>,
    /// Σ w y
    t: f64,
}

/// Sufficient statistics of one random-intercept regression problem.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    x: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    cluster: Vec<usize>,
    cluster_names: Vec<String>,
    xtwx: DMatrix<f64>,
    xtwy: DVector<f64>,
    stats: Vec<ClusterStats>,
    sum_log_w: f64,
    ytwy: f64,
}

impl LmmProblem {
    /// Rows with zero weight are dropped.
    pub fn new(x: &DMatrix<f64>, y: &[f64], clusters: &[String], weights: &[f64]) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n || clusters.len() != n || weights.len() != n {
            return Err(LmmError::DimensionMismatch(format!(
                "X has {n} rows, y {}, clusters {}, weights {}",
                y.len(),
                clusters.len(),
                weights.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LmmError::NonFinite("X"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LmmError::NonFinite("y"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LmmError::NonFinite("weights"));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
        if keep.len() < p + 1 {
            return Err(LmmError::TooFewRows {
                needed: p + 1,
                got: keep.len(),
            });
        }
        let x = x.select_rows(keep.iter());
        let y: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
        let ids: Vec<String> = keep.iter().map(|&i| clusters[i].clone()).collect();
        let (cluster, cluster_names) = cluster_index(&ids);

        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        let mut stats = vec![
            ClusterStats {
                s: 0.0,
                u: DVector::zeros(p),
                t: 0.0,
            };
            cluster_names.len()
        ];
        let mut ytwy = 0.0;
        for i in 0..x.nrows() {
            let wi = w[i];
            let st = &mut stats[cluster[i]];
            st.s += wi;
            st.t += wi * y[i];
            ytwy += wi * y[i] * y[i];
            for a in 0..p {
                let xa = x[(i, a)];
                st.u[a] += wi * xa;
                xtwy[a] += wi * xa * y[i];
                for b in 0..=a {
                    xtwx[(a, b)] += wi * xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        if !linalg::is_well_conditioned(&xtwx) {
            return Err(LmmError::RankDeficient);
        }
        let sum_log_w = w.iter().map(|v| v.ln()).sum();
        Ok(Self {
            x,
            y,
            w,
            cluster,
            cluster_names,
            xtwx,
            xtwy,
            stats,
            sum_log_w,
            ytwy,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_names.len()
    }

    /// Generalised least squares and profiled (restricted) log-likelihood
    /// at a fixed `θ ≥ 0`.
    pub fn profile(&self, theta: f64, criterion: Criterion) -> ProfilePoint {
        let p = self.n_params();
        let n = self.n_obs() as f64;
        let mut a = self.xtwx.clone();
        let mut rhs = self.xtwy.clone();
        let mut log_det_v = -self.sum_log_w;
        for st in &self.stats {
            let c = theta / (1.0 + theta * st.s);
            a.ger(-c, &st.u, &st.u, 1.0);
            rhs.axpy(-c * st.t, &st.u, 1.0);
            log_det_v += (theta * st.s).ln_1p();
        }
        let chol = a
            .clone()
            .cholesky()
            .expect("XᵀV⁻¹X is positive definite when X has full rank");
        let beta = chol.solve(&rhs);
        let log_det_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let resid = DVector::from_iterator(
            self.y.len(),
            self.y.iter().enumerate().map(|(i, yi)| yi - self.x.row(i).dot(&beta.transpose())),
        );
        let mut rss = 0.0;
        let mut cluster_sum = vec![0.0; self.stats.len()];
        for i in 0..self.y.len() {
            rss += self.w[i] * resid[i] * resid[i];
            cluster_sum[self.cluster[i]] += self.w[i] * resid[i];
        }
        for (st, r) in self.stats.iter().zip(&cluster_sum) {
            rss -= theta / (1.0 + theta * st.s) * r * r;
        }
        let rss = rss.max(0.0);
        let (sigma2, loglik) = match criterion {
            Criterion::Ml => {
                let s2 = rss / n;
                (s2, -0.5 * (n * (2.0 * PI * s2).ln() + log_det_v + n))
            }
            Criterion::Reml => {
                let dof = n - p as f64;
                let s2 = rss / dof;
                (
                    s2,
                    -0.5 * (dof * (2.0 * PI * s2).ln() + log_det_v + log_det_a + dof),
                )
            }
        };
        ProfilePoint {
            theta,
            beta,
            rss,
            sigma2,
            loglik,
        }
    }

    /// Maximises the profiled likelihood over θ and assembles the fit.
    pub fn fit(&self, feature_names: &[String], criterion: Criterion) -> Result<LmmFit> {
        if feature_names.len() != self.n_params() {
            return Err(LmmError::DimensionMismatch(format!(
                "{} names for {} columns",
                feature_names.len(),
                self.n_params()
            )));
        }
        if criterion == Criterion::Reml && self.n_obs() <= self.n_params() {
            return Err(LmmError::TooFewRows {
                needed: self.n_params() + 1,
                got: self.n_obs(),
            });
        }
        let at_zero = self.profile(0.0, criterion);
        let single_cluster = self.n_clusters() < 2;
        let exact_fit = at_zero.rss <= 1e-24 * self.ytwy.max(1.0);
        let (best, boundary) = if single_cluster || exact_fit {
            (at_zero, true)
        } else {
            let best = self.maximise(criterion);
            if at_zero.loglik >= best.loglik {
                (at_zero, true)
            } else {
                (best, false)
            }
        };
        Ok(self.assemble(feature_names, best, criterion, boundary, single_cluster, exact_fit))
    }

    fn maximise(&self, criterion: Criterion) -> ProfilePoint {
        let lo = THETA_MIN.ln();
        let hi = THETA_MAX.ln();
        // half-decade grid over [1e-8, 1e8]
        let grid: Vec<f64> = (0..=32)
            .map(|k| (-8.0 + 0.5 * k as f64) * std::f64::consts::LN_10)
            .collect();
        let values: Vec<ProfilePoint> = grid.iter().map(|&t| self.profile(t.exp(), criterion)).collect();
        let k = values
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.loglik > values[best].loglik { i } else { best });
        let a = if k == 0 { lo } else { grid[k - 1] };
        let b = if k + 1 == grid.len() { hi } else { grid[k + 1] };
        let (t, _) = linalg::brent_minimize(
            |t| -self.profile(t.exp(), criterion).loglik,
            a,
            b,
            LOG_THETA_TOL,
        );
        let refined = self.profile(t.exp(), criterion);
        if refined.loglik >= values[k].loglik {
            refined
        } else {
            values[k].clone()
        }
    }

    fn assemble(
        &self,
        feature_names: &[String],
        point: ProfilePoint,
        criterion: Criterion,
        boundary: bool,
        single_cluster: bool,
        exact_fit: bool,
    ) -> LmmFit {
        let theta = if boundary { 0.0 } else { point.theta };
        let sigma2 = if point.sigma2 > 0.0 {
            point.sigma2
        } else {
            f64::MIN_POSITIVE
        };
        let mut sums = vec![0.0; self.stats.len()];
        for i in 0..self.y.len() {
            let r = self.y[i] - self.x.row(i).dot(&point.beta.transpose());
            sums[self.cluster[i]] += self.w[i] * r;
        }
        let b_hat = self
            .cluster_names
            .iter()
            .zip(self.stats.iter().zip(&sums))
            .map(|(name, (st, r))| (name.clone(), theta / (1.0 + theta * st.s) * r))
            .collect();
        LmmFit {
            feature_names: feature_names.to_vec(),
            beta: point.beta.iter().copied().collect(),
            sigma2,
            sigma_b2: theta * sigma2,
            theta,
            b_hat,
            loglik: point.loglik,
            criterion,
            n_obs: self.n_obs(),
            n_clusters: self.n_clusters(),
            boundary,
            single_cluster,
            exact_fit,
        }
    }
}

/// Fits a random-intercept model by maximising the profiled likelihood.
pub fn fit_lmm(
    x: &DMatrix<f64>,
    feature_names: &[String],
    y: &[f64],
    clusters: &[String],
    weights: &[f64],
    criterion: Criterion,
) -> Result<LmmFit> {
    LmmProblem::new(x, y, clusters, weights)?.fit(feature_names, criterion)
}

/// Conditional predictions add `b̂` for clusters seen in training; unseen
/// clusters and marginal mode use `Xβ̂` alone.
pub fn predict_lmm(
    fit: &LmmFit,
    x: &DMatrix<f64>,
    feature_names: &[String],
    clusters: &[String],
    mode: PredictMode,
) -> Result<Vec<f64>> {
    if feature_names != fit.feature_names.as_slice() || x.ncols() != fit.beta.len() {
        return Err(LmmError::ColumnMismatch {
            expected: fit.feature_names.clone(),
            got: feature_names.to_vec(),
        });
    }
    if mode == PredictMode::Conditional && clusters.len() != x.nrows() {
        return Err(LmmError::DimensionMismatch(format!(
            "{} rows, {} cluster ids",
            x.nrows(),
            clusters.len()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| {
            let fixed: f64 = (0..x.ncols()).map(|j| x[(i, j)] * fit.beta[j]).sum();
            match mode {
                PredictMode::Marginal => fixed,
                PredictMode::Conditional => {
                    fixed + fit.b_hat.get(&clusters[i]).copied().unwrap_or(0.0)
                }
            }
        })
        .collect())
}

/// Bayesian information criterion of the ML fit with `p` fixed effects
/// plus two variance parameters.
pub fn bic(ml_loglik: f64, n_fixed: usize, n_obs: usize) -> f64 {
    -2.0 * ml_loglik + (n_fixed + 2) as f64 * (n_obs as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected candidate names, in order of inclusion.
    pub selected: Vec<String>,
    /// BIC after each step, starting with the intercept-only model.
    pub bic_path: Vec<f64>,
    /// Fit on `(Intercept) + selected` under the requested criterion.
    pub fit: LmmFit,
}

/// Forward stepwise selection by BIC. The intercept is always included;
/// candidates are added greedily while BIC strictly improves.
pub fn forward_select(
    candidates: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    clusters: &[String],
    weights: &[f64],
    criterion: Criterion,
) -> Result<Selection> {
    if candidates.ncols() == 0 {
        return Err(LmmError::NoCandidates);
    }
    if names.len() != candidates.ncols() {
        return Err(LmmError::DimensionMismatch(format!(
            "{} names for {} candidates",
            names.len(),
            candidates.ncols()
        )));
    }
    let design = |cols: &[usize]| {
        let mut m = DMatrix::from_element(candidates.nrows(), cols.len() + 1, 1.0);
        for (k, &c) in cols.iter().enumerate() {
            m.set_column(k + 1, &candidates.column(c));
        }
        m
    };
    let score = |cols: &[usize]| -> Result<f64> {
        let problem = LmmProblem::new(&design(cols), y, clusters, weights)?;
        let ml = problem.fit(&column_names(names, cols), Criterion::Ml)?;
        Ok(bic(ml.loglik, cols.len() + 1, problem.n_obs()))
    };
    let mut chosen: Vec<usize> = Vec::new();
    let mut current = score(&chosen)?;
    let mut path = vec![current];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..candidates.ncols() {
            if chosen.contains(&c) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(c);
            let s = match score(&trial) {
                Ok(s) => s,
                Err(LmmError::RankDeficient) => continue,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((c, s));
            }
        }
        match best {
            Some((c, s)) if s < current => {
                chosen.push(c);
                current = s;
                path.push(s);
            }
            _ => break,
        }
    }
    let fit = fit_lmm(
        &design(&chosen),
        &column_names(names, &chosen),
        y,
        clusters,
        weights,
        criterion,
    )?;
    Ok(Selection {
        selected: chosen.iter().map(|&c| names[c].clone()).collect(),
        bic_path: path,
        fit,
    })
}

fn column_names(names: &[String], cols: &[usize]) -> Vec<String> {
    std::iter::once(INTERCEPT.to_string())
        .chain(cols.iter().map(|&c| names[c].clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ids(groups: usize, reps: usize) -> Vec<String> {
        (0..groups * reps).map(|i| format!("g{}", i / reps)).collect()
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn noiseless_recovers_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(0.0..8.0) });
        let y: Vec<f64> = (0..n).map(|i| -0.33 + 0.226 * x[(i, 1)]).collect();
        let fit = fit_lmm(&x, &names(2), &y, &ids(6, 10), &[1.0; 60], Criterion::Reml).unwrap();
        assert!((fit.beta[0] + 0.33).abs() < 1e-12);
        assert!((fit.beta[1] - 0.226).abs() < 1e-12);
        assert!(fit.theta <= 1e-6);
        assert!(fit.exact_fit && fit.sigma2 > 0.0);
    }

    #[test]
    fn single_cluster_is_flagged() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let fit = fit_lmm(&x, &names(1), &[1.0, 2.0, 3.0, 4.0, 6.0], &ids(1, 5), &[1.0; 5], Criterion::Reml)
            .unwrap();
        assert!(fit.single_cluster);
        assert_eq!(fit.sigma_b2, 0.0);
        assert!((fit.beta[0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_rejected() {
        let x = DMatrix::from_fn(10, 2, |_, _| 1.0);
        let err = fit_lmm(&x, &names(2), &[0.0; 10], &ids(2, 5), &[1.0; 10], Criterion::Reml).unwrap_err();
        assert_eq!(err, LmmError::RankDeficient);
    }

    #[test]
    fn single_row_cluster_shrinkage() {
        // cluster "solo" has one row; its b̂ must equal θ/(θ+1) times its residual
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut clusters = ids(20, 5);
        clusters.push("solo".into());
        let n = clusters.len();
        let b: Vec<f64> = (0..21).map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 + b[i / 5] + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = DMatrix::from_element(n, 1, 1.0);
        let fit = fit_lmm(&x, &names(1), &y, &clusters, &vec![1.0; n], Criterion::Reml).unwrap();
        let r = y[n - 1] - fit.beta[0];
        let expected = fit.theta / (fit.theta + 1.0) * r;
        assert!((fit.b_hat["solo"] - expected).abs() < 1e-12);
        let cond = predict_lmm(&fit, &x.rows(n - 1, 1).into_owned(), &names(1), &clusters[n - 1..], PredictMode::Conditional)
            .unwrap();
        assert!((cond[0] - (fit.beta[0] + expected)).abs() < 1e-12);
    }

    #[test]
    fn prediction_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let y: Vec<f64> = (0..n).map(|i| (i / 10) as f64 + rng.random_range(-0.5..0.5)).collect();
        let x = DMatrix::from_element(n, 1, 1.0);
        let cl = ids(4, 10);
        let fit = fit_lmm(&x, &names(1), &y, &cl, &vec![1.0; n], Criterion::Reml).unwrap();
        let unseen = vec!["zzz".to_string()];
        let row = DMatrix::from_element(1, 1, 1.0);
        let c = predict_lmm(&fit, &row, &names(1), &unseen, PredictMode::Conditional).unwrap();
        let m = predict_lmm(&fit, &row, &names(1), &unseen, PredictMode::Marginal).unwrap();
        assert_eq!(c, m);
        let m2 = predict_lmm(&fit, &row, &names(1), &["g0".to_string()], PredictMode::Marginal).unwrap();
        assert_eq!(m, m2);
        let bad = predict_lmm(&fit, &row, &["other".to_string()], &unseen, PredictMode::Marginal);
        assert!(matches!(bad, Err(LmmError::ColumnMismatch { .. })));
    }

    #[test]
    fn zero_theta_conditional_equals_marginal() {
        // identical cluster means: σ_b² estimate truncates at zero
        let y = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let x = DMatrix::from_element(9, 1, 1.0);
        let cl = ids(3, 3);
        let fit = fit_lmm(&x, &names(1), &y, &cl, &[1.0; 9], Criterion::Reml).unwrap();
        assert_eq!(fit.theta, 0.0);
        assert!(fit.boundary);
        let c = predict_lmm(&fit, &x, &names(1), &cl, PredictMode::Conditional).unwrap();
        let m = predict_lmm(&fit, &x, &names(1), &cl, PredictMode::Marginal).unwrap();
        assert_eq!(c, m);
    }

    #[test]
    fn forward_select_errors_without_candidates() {
        let x = DMatrix::<f64>::zeros(10, 0);
        let err = forward_select(&x, &[], &[0.0; 10], &ids(2, 5), &[1.0; 10], Criterion::Reml).unwrap_err();
        assert_eq!(err, LmmError::NoCandidates);
    }

    #[test]
    fn forward_select_ignores_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 300;
        let cl = ids(30, 10);
        let noise = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..30).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 + b[i / 10] + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sel = forward_select(&noise, &["noise".to_string()], &y, &cl, &vec![1.0; n], Criterion::Reml)
            .unwrap();
        assert!(sel.selected.is_empty());
        assert_eq!(sel.fit.feature_names, vec![INTERCEPT.to_string()]);
    }

    #[test]
    fn weights_scale_like_replication() {
        // doubling a row's weight matches duplicating it when θ is held at 0
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [0.1, 0.9, 2.2, 2.8];
        let w = [1.0, 2.0, 1.0, 1.0];
        let cl: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let p = LmmProblem::new(&x, &y, &cl, &w).unwrap().profile(0.0, Criterion::Ml);
        let x2 = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y2 = [0.1, 0.9, 0.9, 2.2, 2.8];
        let cl2: Vec<String> = ["a", "a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let p2 = LmmProblem::new(&x2, &y2, &cl2, &[1.0; 5]).unwrap().profile(0.0, Criterion::Ml);
        for k in 0..2 {
            assert!((p.beta[k] - p2.beta[k]).abs() < 1e-12);
        }
        assert!((p.rss - p2.rss).abs() < 1e-12);
    }
}
