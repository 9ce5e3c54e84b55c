//! Independent oracles for the random-intercept mixed model.

use doseloop_core::lmm::{self, fit_lmm, forward_select, Criterion, LmmProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cluster_ids(groups: usize, reps: usize) -> Vec<String> {
    (0..groups * reps).map(|i| format!("c{:03}", i / reps)).collect()
}

/// Classical one-way ANOVA moment estimates for a balanced layout.
fn anova_oracle(y: &[f64], groups: usize, reps: usize) -> (f64, f64) {
    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let means: Vec<f64> = (0..groups)
        .map(|g| y[g * reps..(g + 1) * reps].iter().sum::<f64>() / reps as f64)
        .collect();
    let ssw: f64 = (0..groups)
        .map(|g| {
            y[g * reps..(g + 1) * reps]
                .iter()
                .map(|v| (v - means[g]).powi(2))
                .sum::<f64>()
        })
        .sum();
    let ssb: f64 = means.iter().map(|m| reps as f64 * (m - grand).powi(2)).sum();
    let msw = ssw / (groups * (reps - 1)) as f64;
    let msb = ssb / (groups - 1) as f64;
    (msw, ((msb - msw) / reps as f64).max(0.0))
}

fn balanced(seed: u64, groups: usize, reps: usize, sigma_b: f64, sigma: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = Normal::new(0.0, sigma_b).unwrap();
    let ne = Normal::new(0.0, sigma).unwrap();
    let mut y = Vec::new();
    for _ in 0..groups {
        let b = nb.sample(&mut rng);
        for _ in 0..reps {
            y.push(3.0 + b + ne.sample(&mut rng));
        }
    }
    y
}

#[test]
fn reml_matches_balanced_anova() {
    for (seed, sb) in [(1, 0.5), (2, 1.0), (3, 0.2), (4, 2.0)] {
        let (g, n) = (12, 7);
        let y = balanced(seed, g, n, sb, 0.7);
        let (msw, sb2) = anova_oracle(&y, g, n);
        assert!(sb2 > 0.0, "seed {seed} should give a positive moment estimate");
        let x = DMatrix::from_element(g * n, 1, 1.0);
        let fit = fit_lmm(&x, &["mu".into()], &y, &cluster_ids(g, n), &vec![1.0; g * n], Criterion::Reml)
            .unwrap();
        assert!(((fit.sigma2 - msw) / msw).abs() < 1e-6, "sigma2 {} vs {}", fit.sigma2, msw);
        assert!(((fit.sigma_b2 - sb2) / sb2).abs() < 1e-6, "sigma_b2 {} vs {}", fit.sigma_b2, sb2);
        assert!((fit.theta - fit.sigma_b2 / fit.sigma2).abs() < 1e-10);
    }
}

#[test]
fn negative_moment_estimate_truncates() {
    // find a seed where MSB < MSW under no random effect
    let (g, n) = (10, 5);
    for seed in 0..50 {
        let y = balanced(seed, g, n, 1e-9, 1.0);
        let (_, sb2) = anova_oracle(&y, g, n);
        if sb2 == 0.0 {
            let x = DMatrix::from_element(g * n, 1, 1.0);
            let fit = fit_lmm(&x, &["mu".into()], &y, &cluster_ids(g, n), &vec![1.0; g * n], Criterion::Reml)
                .unwrap();
            assert!(fit.boundary);
            assert_eq!(fit.sigma_b2, 0.0);
            return;
        }
    }
    panic!("no seed produced MSB < MSW");
}

fn random_problem(seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<String>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(5..25);
    let mut clusters = Vec::new();
    for g in 0..groups {
        for _ in 0..rng.random_range(1..12) {
            clusters.push(format!("g{g}"));
        }
    }
    let n = clusters.len();
    let p = 3;
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let b: Vec<f64> = (0..groups).map(|_| rng.random_range(-1.0..1.0) * rng.random_range(0.0..1.5)).collect();
    let y = (0..n)
        .map(|i| {
            let g: usize = clusters[i][1..].parse().unwrap();
            0.5 + x[(i, 1)] - 0.3 * x[(i, 2)] + b[g] + rng.random_range(-1.0..1.0)
        })
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    (x, y, clusters, w)
}

#[test]
fn gls_at_zero_theta_is_ols() {
    for seed in 0..5 {
        let (x, y, cl, _) = random_problem(seed);
        let ones = vec![1.0; y.len()];
        let p = LmmProblem::new(&x, &y, &cl, &ones).unwrap().profile(0.0, Criterion::Reml);
        let ols = x
            .clone()
            .svd(true, true)
            .solve(&DVector::from_vec(y.clone()), 1e-14)
            .unwrap();
        for k in 0..x.ncols() {
            assert!((p.beta[k] - ols[k]).abs() < 1e-10, "coef {k}: {} vs {}", p.beta[k], ols[k]);
        }
    }
}

#[test]
fn profiled_likelihood_dominates_grid() {
    for seed in 0..5 {
        let (x, y, cl, w) = random_problem(100 + seed);
        let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let problem = LmmProblem::new(&x, &y, &cl, &w).unwrap();
        for criterion in [Criterion::Reml, Criterion::Ml] {
            let fit = problem.fit(&names, criterion).unwrap();
            for k in 0..=16 {
                let theta = 10f64.powf(-4.0 + 0.5 * k as f64);
                let at = problem.profile(theta, criterion).loglik;
                assert!(fit.loglik >= at - 1e-6, "seed {seed} θ={theta}: {} < {}", fit.loglik, at);
            }
        }
    }
}

#[test]
fn shrinkage_identity_holds_per_cluster() {
    let (x, y, cl, _) = random_problem(42);
    let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    let ones = vec![1.0; y.len()];
    let fit = fit_lmm(&x, &names, &y, &cl, &ones, Criterion::Reml).unwrap();
    for (id, b) in &fit.b_hat {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| &cl[i] == id).collect();
        let n_i = rows.len() as f64;
        let mean_resid = rows
            .iter()
            .map(|&i| y[i] - (0..x.ncols()).map(|j| x[(i, j)] * fit.beta[j]).sum::<f64>())
            .sum::<f64>()
            / n_i;
        let lambda = fit.shrinkage(n_i);
        assert!((0.0..1.0).contains(&lambda));
        assert!((b - lambda * mean_resid).abs() < 1e-12);
    }
}

#[test]
fn forward_selection_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (g, r) = (40, 8);
    let n = g * r;
    let cl = cluster_ids(g, r);
    let cand = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, 0.3).unwrap();
    let b: Vec<f64> = (0..g).map(|_| noise.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 2.0 * cand[(i, 0)] + b[i / r] + noise.sample(&mut rng))
        .collect();
    let names: Vec<String> = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
    let w = vec![1.0; n];

    // exhaustive: all 8 subsets scored by ML BIC
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..8 {
        let cols: Vec<usize> = (0..3).filter(|c| mask & (1 << c) != 0).collect();
        let mut d = DMatrix::from_element(n, cols.len() + 1, 1.0);
        for (k, &c) in cols.iter().enumerate() {
            d.set_column(k + 1, &cand.column(c));
        }
        let dn: Vec<String> = (0..=cols.len()).map(|k| format!("c{k}")).collect();
        let ml = fit_lmm(&d, &dn, &y, &cl, &w, Criterion::Ml).unwrap();
        let score = lmm::bic(ml.loglik, cols.len() + 1, n);
        if score < best.0 {
            best = (score, cols.iter().map(|&c| names[c].clone()).collect());
        }
    }
    let sel = forward_select(&cand, &names, &y, &cl, &w, Criterion::Reml).unwrap();
    assert_eq!(sel.selected, vec!["x1".to_string()]);
    assert_eq!(sel.selected, best.1);
    assert!((sel.bic_path.last().unwrap() - best.0).abs() < 1e-9);
}
