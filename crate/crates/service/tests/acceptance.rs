//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use doseloop_core::agreement::{krippendorff_alpha, RatingsMatrix};
use doseloop_core::dataset::{generate_synthetic, load_csv_auto, temporal_split, Dataset, FeatureRange, TARGET_COLUMN};
use doseloop_core::feedback::{evaluate, load_snapshot, snapshot_dir, write_snapshot, EvalMetrics, SNAPSHOT_FILES};
use doseloop_core::glmmtree::{
    default_partitioners, fit_bagged_glmm_tree, fit_glmm_tree, predict_glmm_tree, BaggedParams, GlmmTreeParams, MixedPredictor,
    NodeModel,
};
use doseloop_core::lmm::{fit_lmm, Criterion, LmmProblem, PredictMode};
use doseloop_core::rules::{
    apply_edit, encode, extract_rules, sample_box, Condition, EditOp, Op, Provenance, Rule, RuleEdit, RuleSet,
};
use doseloop_core::scenarios::{self, DOSE};
use doseloop_core::trees::{fit_cart, predict_tree, Node, TreeParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        Ok(detail.into())
    } else {
        Err(detail.into())
    }
}

fn regs() -> Vec<String> {
    vec![DOSE.to_string()]
}

fn split_70(d: &Dataset, visits: usize) -> (Dataset, Dataset) {
    let cutoff = d.min_date().unwrap() + chrono::Duration::days(14 * visits as i64 * 7 / 10);
    let s = temporal_split(d, cutoff);
    (s.train, s.test)
}

fn planted_recovery(seed: u64) -> Result<Duration, String> {
    let (d, truth) = generate_synthetic(&scenarios::three_leaf(), seed).map_err(|e| e.to_string())?;
    let parts = default_partitioners(d.schema(), &regs());
    let start = Instant::now();
    let fit = fit_glmm_tree(&d, &regs(), &parts, &GlmmTreeParams::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if fit.tree.n_leaves() != 3 {
        return Err(format!("{} leaves", fit.tree.n_leaves()));
    }
    let mut splits: Vec<(String, f64)> = fit
        .tree
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Split { feature, threshold, .. } => Some((fit.tree.features[*feature].clone(), *threshold)),
            Node::Leaf { .. } => None,
        })
        .collect();
    splits.sort_by(|a, b| a.0.cmp(&b.0));
    let [(f1, t1), (f2, t2)] = &splits[..] else {
        return Err(format!("splits {splits:?}"));
    };
    if f1 != "z1" || f2 != "z2" || t1.abs() > 0.1 || (t2 - 0.5).abs() > 0.1 {
        return Err(format!("splits {splits:?}"));
    }
    // One interior point per planted regime; each must land in its own leaf.
    let probes = [[-0.9, 0.0], [0.9, -0.6], [0.9, 1.1]];
    let mut leaves = Vec::new();
    for (rule, [z1, z2]) in truth.rules.rules.iter().zip(probes) {
        let leaf = fit.leaf_of(&|name: &str| match name {
            "z1" => Some(z1),
            "z2" => Some(z2),
            _ => Some(0.0),
        });
        let m = fit.tree.leaf_model(leaf);
        if (m.beta0 - rule.model.beta0).abs() > 0.05 || (m.beta1[0] - rule.model.beta1[0]).abs() > 0.05 {
            return Err(format!("rule {} fitted as {:?}", rule.id, m));
        }
        leaves.push(leaf);
    }
    leaves.sort();
    leaves.dedup();
    if leaves.len() != 3 {
        return Err("regimes share a leaf".into());
    }
    Ok(elapsed)
}

fn criterion_1() -> Outcome {
    let mut hits = 0;
    let mut slowest = Duration::ZERO;
    let mut misses = Vec::new();
    for seed in 0..10 {
        match planted_recovery(seed) {
            Ok(t) => {
                hits += 1;
                slowest = slowest.max(t);
            }
            Err(e) => misses.push(format!("seed {seed}: {e}")),
        }
    }
    let detail = format!("{hits}/10 seeds recovered, slowest fit {:.1}s {misses:?}", slowest.as_secs_f64());
    check(hits >= 8 && slowest < Duration::from_secs(60), detail)
}

fn mae(p: &[f64], y: &[f64], evals: &mut Vec<EvalMetrics>) -> f64 {
    let m = evaluate(p, y, "test").unwrap();
    evals.push(m.clone());
    m.mae
}

fn criterion_2(evals: &mut Vec<EvalMetrics>) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let d = scenarios::smooth_response(100, 20, seed);
        let (train, test) = split_70(&d, 20);
        let parts = default_partitioners(d.schema(), &regs());
        let single = fit_glmm_tree(&train, &regs(), &parts, &GlmmTreeParams::default()).map_err(|e| e.to_string())?;
        let bagged = fit_bagged_glmm_tree(&train, &regs(), &parts, &BaggedParams { n_trees: 25, seed, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let names = d.schema().to_vec();
        let cart = fit_cart(&train.matrix(&names).unwrap(), &names, &train.targets(), &train.weights(), TreeParams::default())
            .map_err(|e| e.to_string())?;
        let y = test.targets();
        let b = mae(&bagged.predict_dataset(&test, PredictMode::Conditional).unwrap(), &y, evals);
        let s = mae(&predict_glmm_tree(&single, &test, PredictMode::Conditional).unwrap(), &y, evals);
        let c = mae(&predict_tree(&cart, &test.matrix(&names).unwrap()), &y, evals);
        wins += (b < s && s < c) as usize;
        rows.push(format!("{b:.3}<{s:.3}<{c:.3}"));
    }
    check(wins >= 8, format!("ordering held in {wins}/10 seeds [{}]", rows.join(" ")))
}

fn anova_oracle(y: &[f64], groups: usize, reps: usize) -> (f64, f64) {
    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let means: Vec<f64> = y.chunks(reps).map(|c| c.iter().sum::<f64>() / reps as f64).collect();
    let ssw: f64 = y.chunks(reps).zip(&means).map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sum();
    let ssb: f64 = means.iter().map(|m| reps as f64 * (m - grand).powi(2)).sum();
    let msw = ssw / (groups * (reps - 1)) as f64;
    let msb = ssb / (groups - 1) as f64;
    (msw, ((msb - msw) / reps as f64).max(0.0))
}

fn random_problem(seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<String>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(5..25);
    let clusters: Vec<String> = (0..groups)
        .flat_map(|g| vec![format!("g{g}"); rng.random_range(1..12)])
        .collect();
    let n = clusters.len();
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let b: Vec<f64> = (0..groups).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|i| {
            let g: usize = clusters[i][1..].parse().unwrap();
            0.5 + x[(i, 1)] - 0.3 * x[(i, 2)] + b[g] + rng.random_range(-1.0..1.0)
        })
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    (x, y, clusters, w)
}

fn criterion_3() -> Outcome {
    let (g, reps) = (12, 7);
    let mut worst_rel = 0.0f64;
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = Normal::new(0.0, 0.5 + seed as f64 * 0.5).unwrap();
        let ne = Normal::new(0.0, 0.7).unwrap();
        let y: Vec<f64> = (0..g)
            .flat_map(|_| {
                let b = nb.sample(&mut rng);
                (0..reps).map(|_| 3.0 + b + ne.sample(&mut rng)).collect::<Vec<_>>()
            })
            .collect();
        let ids: Vec<String> = (0..g * reps).map(|i| format!("c{}", i / reps)).collect();
        let (msw, sb2) = anova_oracle(&y, g, reps);
        if sb2 == 0.0 {
            return Err(format!("seed {seed} gave a zero moment estimate"));
        }
        let fit = fit_lmm(&DMatrix::from_element(g * reps, 1, 1.0), &["mu".into()], &y, &ids, &vec![1.0; g * reps], Criterion::Reml)
            .map_err(|e| e.to_string())?;
        worst_rel = worst_rel.max(((fit.sigma2 - msw) / msw).abs()).max(((fit.sigma_b2 - sb2) / sb2).abs());
    }
    let mut worst_gls = 0.0f64;
    let mut dominated = true;
    for seed in 0..5 {
        let (x, y, cl, w) = random_problem(seed);
        let p = LmmProblem::new(&x, &y, &cl, &vec![1.0; y.len()]).unwrap().profile(0.0, Criterion::Reml);
        let ols = x.clone().svd(true, true).solve(&DVector::from_vec(y.clone()), 1e-14).unwrap();
        worst_gls = (0..x.ncols()).map(|k| (p.beta[k] - ols[k]).abs()).fold(worst_gls, f64::max);

        let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let problem = LmmProblem::new(&x, &y, &cl, &w).unwrap();
        for criterion in [Criterion::Reml, Criterion::Ml] {
            let best = problem.fit(&names, criterion).map_err(|e| e.to_string())?.loglik;
            for k in 0..=16 {
                let theta = 10f64.powf(-4.0 + 0.5 * k as f64);
                dominated &= best >= problem.profile(theta, criterion).loglik - 1e-6;
            }
        }
    }
    check(
        worst_rel < 1e-6 && worst_gls < 1e-10 && dominated,
        format!("ANOVA rel err {worst_rel:.1e}, GLS-OLS {worst_gls:.1e}, grid dominance {dominated}"),
    )
}

fn grid(values: Vec<Vec<Option<f64>>>) -> RatingsMatrix {
    RatingsMatrix {
        unit_ids: (0..values.len()).map(|u| format!("u{u}")).collect(),
        rater_ids: (0..values[0].len()).map(|r| format!("r{r}")).collect(),
        values,
    }
}

/// Alpha from explicit ordered value pairs.
fn pairwise_alpha(m: &RatingsMatrix) -> f64 {
    let units: Vec<Vec<f64>> = m
        .values
        .iter()
        .map(|r| r.iter().flatten().copied().collect::<Vec<_>>())
        .filter(|u| u.len() >= 2)
        .collect();
    let n: usize = units.iter().map(Vec::len).sum();
    let sq = |v: &[f64]| {
        let mut s = 0.0;
        for (i, a) in v.iter().enumerate() {
            for (j, b) in v.iter().enumerate() {
                if i != j {
                    s += (a - b).powi(2);
                }
            }
        }
        s
    };
    let d_o = units.iter().map(|u| sq(u) / (u.len() - 1) as f64).sum::<f64>() / n as f64;
    let d_e = sq(&units.concat()) / (n * (n - 1)) as f64;
    1.0 - d_o / d_e
}

fn criterion_4() -> Outcome {
    let alpha = |m: &RatingsMatrix| krippendorff_alpha(m).unwrap().alpha;
    let perfect = grid((0..10).map(|u| vec![Some(u as f64 * 0.3); 4]).collect());
    let perfect_alpha = alpha(&perfect);

    let v = Some;
    let small = grid(vec![
        vec![v(1.0), v(2.0), v(1.0), None, v(1.5), v(2.0)],
        vec![v(3.0), v(3.0), None, v(4.0), v(3.5), None],
        vec![None, v(0.5), v(0.0), v(0.25), None, v(1.0)],
        vec![v(5.0), v(4.0), v(4.5), v(5.0), v(5.5), v(4.0)],
    ]);
    let pair_err = (alpha(&small) - pairwise_alpha(&small)).abs();

    let mut worst_null = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = grid((0..280).map(|_| (0..5).map(|_| Some(rng.random_range(0.0..8.0))).collect()).collect());
        worst_null = worst_null.max(alpha(&m).abs());
    }

    let mut worst_affine = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let rows: Vec<Vec<Option<f64>>> = (0..rng.random_range(3..15))
            .map(|_| (0..4).map(|_| rng.random_bool(0.8).then(|| rng.random_range(-3.0..3.0))).collect())
            .collect();
        let m = grid(rows.clone());
        let Ok(base) = krippendorff_alpha(&m) else { continue };
        let (a, b) = (rng.random_range(0.1..5.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 }, rng.random_range(-100.0..100.0));
        let moved = grid(rows.iter().map(|r| r.iter().map(|x| x.map(|x| a * x + b)).collect()).collect());
        worst_affine = worst_affine.max((alpha(&moved) - base.alpha).abs());
    }
    check(
        perfect_alpha == 1.0 && pair_err < 1e-12 && worst_null < 0.05 && worst_affine < 1e-10,
        format!(
            "perfect {perfect_alpha}, pairwise err {pair_err:.1e}, max null |alpha| {worst_null:.4}, affine err {worst_affine:.1e}"
        ),
    )
}

fn criterion_5(evals: &mut Vec<EvalMetrics>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let run = Command::new(env!("CARGO_BIN_EXE_doseloop"))
        .args(["--json", "loop", "run", "--expert", "oracle", "--iterations", "3", "--out"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !run.status.success() {
        return Err(String::from_utf8_lossy(&run.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&run.stdout).map_err(|e| e.to_string())?;
    let maes: Vec<f64> = v["test_mae"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    for h in v["history"].as_array().unwrap() {
        for split in ["train", "test"] {
            evals.push(serde_json::from_value(h[split].clone()).unwrap());
        }
    }
    let decreasing = maes.len() == 4 && maes.windows(2).all(|w| w[1] < w[0]);
    let reduction = 1.0 - maes.last().unwrap() / maes[0];

    let train = load_csv_auto(out.join("train.csv"), TARGET_COLUMN).map_err(|e| e.to_string())?;
    let test = load_csv_auto(out.join("test.csv"), TARGET_COLUMN).map_err(|e| e.to_string())?;
    let replay_dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    for k in 1..maes.len() as u64 {
        let previous = load_snapshot(&out, k - 1).map_err(|e| e.to_string())?;
        let stored = load_snapshot(&out, k).map_err(|e| e.to_string())?;
        let batch = stored.log.last().unwrap().as_submitted();
        let (replayed, _) = previous.iterate(&batch, &train, &test).map_err(|e| e.to_string())?;
        write_snapshot(&replayed, replay_dir.path()).map_err(|e| e.to_string())?;
        for f in SNAPSHOT_FILES {
            identical &= same_file(&snapshot_dir(&out, k).join(f), &snapshot_dir(replay_dir.path(), k).join(f));
        }
    }
    check(
        decreasing && reduction >= 0.10 && identical,
        format!("test MAE {maes:.4?}, reduction {:.1}%, replay identical {identical}", 100.0 * reduction),
    )
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((fs::read(a), fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn fixture_rule(id: u32, conditions: Vec<Condition>, beta0: f64, beta1: f64) -> Rule {
    Rule {
        id,
        conditions,
        model: NodeModel { beta0, beta1: vec![beta1] },
        support: 120,
        provenance: Provenance::Learned,
    }
}

fn criterion_6() -> Outcome {
    let (d, _) = generate_synthetic(&scenarios::three_leaf(), 3).map_err(|e| e.to_string())?;
    let parts = default_partitioners(d.schema(), &regs());
    let fit = fit_glmm_tree(&d, &regs(), &parts, &GlmmTreeParams::default()).map_err(|e| e.to_string())?;
    let rs = extract_rules(&fit);
    let back = RuleSet::from_json(&rs.to_json()).map_err(|e| e.to_string())?;
    let ranges: Vec<FeatureRange> = d.feature_ranges().into_iter().filter(|r| parts.contains(&r.name)).collect();
    let names: Vec<String> = ranges.iter().map(|r| r.name.clone()).collect();
    let pts = sample_box(&ranges, 10_000, 7);
    let enc = encode(&rs, &names, &pts).map_err(|e| e.to_string())?;
    let round_trip = enc == encode(&back, &names, &pts).map_err(|e| e.to_string())?;
    let sums_one = enc.row_sums().iter().all(|&s| s == 1);

    let epo3 = "EPO_DOSE_per_week_3_visit_before";
    let depo2 = "ΔEPO_DOSE_2_visit_before";
    let dhb1 = "ΔHb_1_visit_before";
    let dhb2 = "ΔHb_2_visit_before";
    let sucro = "SUCROFER_DOSE_prev_visit";
    let rule_28 = fixture_rule(
        28,
        vec![
            Condition::new(epo3, Op::Gt, 0.125),
            Condition::new(depo2, Op::Gt, 0.0),
            Condition::new(dhb1, Op::Le, 1.6),
            Condition::new(dhb2, Op::Gt, -0.1),
        ],
        -0.4572429,
        0.2532219,
    );
    let fixture = RuleSet { version: 3, regressors: vec!["EPO_DOSE".into()], rules: vec![rule_28] };
    let edit = RuleEdit {
        rule_id: 28,
        operations: vec![
            EditOp::ModifyThreshold { feature: epo3.into(), op: None, threshold: 0.2 },
            EditOp::RemoveCondition { feature: dhb2.into(), op: Op::Gt },
            EditOp::AddCondition { condition: Condition::new(sucro, Op::Le, 0.0) },
            EditOp::SetModel { model: NodeModel { beta0: -0.6056191, beta1: vec![0.2510769] } },
        ],
        author: "nephrologist-1".into(),
        timestamp: Utc.with_ymd_and_hms(2021, 3, 1, 9, 0, 0).unwrap(),
    };
    let known: Vec<String> = [epo3, depo2, dhb1, dhb2, sucro, "EPO_DOSE"].iter().map(|s| s.to_string()).collect();
    let edited = apply_edit(&fixture, &edit, &known).map_err(|e| e.to_string())?;
    let text = edited.rules.get(28).unwrap().text(&edited.rules.regressors);
    let expected = "IF EPO_DOSE_per_week_3_visit_before > 0.2 ∧ ΔEPO_DOSE_2_visit_before > 0 ∧ ΔHb_1_visit_before ≤ 1.6 ∧ \
                    SUCROFER_DOSE_prev_visit ≤ 0 THEN ΔĤb = -0.6056191 + 0.2510769 * EPO_DOSE";
    check(
        round_trip && sums_one && text == expected,
        format!(
            "{} learned rules, membership round trip {round_trip}, row sums 1 on 10000 points {sums_one}, edited text matches {}",
            rs.rules.len(),
            text == expected
        ),
    )
}

fn criterion_7(evals: &[EvalMetrics]) -> Outcome {
    let a = evaluate(&[1.0, -1.0], &[0.0, 0.0], "fixture").map_err(|e| e.to_string())?;
    let b = evaluate(&[0.0, 2.0], &[0.0, 0.0], "fixture").map_err(|e| e.to_string())?;
    let fixtures = (a.mae, a.rmse) == (1.0, 1.0) && (b.mae, b.rmse) == (1.0, 2f64.sqrt());
    let violations = evals.iter().filter(|m| m.mae > m.rmse).count();
    check(
        fixtures && violations == 0 && !evals.is_empty(),
        format!("residual fixtures exact {fixtures}, {violations} of {} evaluations with MAE > RMSE", evals.len()),
    )
}

fn main() {
    let mut evals = Vec::new();
    let results = vec![
        ("planted-structure recovery", criterion_1()),
        ("bagged < single < CART test MAE", criterion_2(&mut evals)),
        ("LMM oracles", criterion_3()),
        ("Krippendorff alpha", criterion_4()),
        ("closed loop and replay", criterion_5(&mut evals)),
        ("rule round trip and edit fixture", criterion_6()),
        ("metric invariants", criterion_7(&evals)),
    ];
    let mut failed = 0;
    for (k, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("PASS criterion {} ({name}): {d}", k + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {d}", k + 1)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
