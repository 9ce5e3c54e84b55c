//! Planted-truth configurations used by the synthetic studies.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    generate_synthetic, temporal_split, Dataset, DatasetError, FeatureRange, SyntheticTruth, VisitRecord,
    TARGET_COLUMN,
};
use crate::glmmtree::NodeModel;
use crate::rules::{Condition, Op, Provenance, Rule, RuleSet};

/// Name of the dose regressor in synthetic data.
pub const DOSE: &str = "EPO_DOSE";

/// Half-width of a unit-variance uniform covariate.
pub const UNIT_HALF_WIDTH: f64 = 1.732_050_807_568_877_2;

fn rule(id: u32, conditions: Vec<Condition>, beta0: f64, beta1: f64) -> Rule {
    Rule {
        id,
        conditions,
        model: NodeModel {
            beta0,
            beta1: vec![beta1],
        },
        support: 0,
        provenance: Provenance::Learned,
    }
}

fn standardized(names: &[&str]) -> Vec<FeatureRange> {
    let mut v: Vec<FeatureRange> = names
        .iter()
        .map(|n| FeatureRange::new(*n, -UNIT_HALF_WIDTH, UNIT_HALF_WIDTH))
        .collect();
    v.push(FeatureRange::new(DOSE, 0.0, 8.0));
    v
}

fn truth(rules: Vec<Rule>, covariates: Vec<FeatureRange>) -> SyntheticTruth {
    SyntheticTruth {
        rules: RuleSet {
            version: 0,
            regressors: vec![DOSE.into()],
            rules,
        },
        covariates,
        sigma_b: 0.3,
        sigma: 0.2,
        n_clusters: 300,
        visits_per_cluster: 30,
        hb_start: None,
        start_date: NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date"),
        visit_interval_days: 14,
    }
}

/// Two regimes split at `z ≤ 0`, one noise covariate.
pub fn two_leaf() -> SyntheticTruth {
    truth(
        vec![
            rule(1, vec![Condition::new("z", Op::Le, 0.0)], -0.33, 0.226),
            rule(2, vec![Condition::new("z", Op::Gt, 0.0)], -0.46, 0.253),
        ],
        standardized(&["z", "noise"]),
    )
}

/// Three regimes: `z1 ≤ 0`, then `z2` splits the upper half at 0.5.
pub fn three_leaf() -> SyntheticTruth {
    truth(
        vec![
            rule(1, vec![Condition::new("z1", Op::Le, 0.0)], -0.33, 0.226),
            rule(
                2,
                vec![Condition::new("z1", Op::Gt, 0.0), Condition::new("z2", Op::Le, 0.5)],
                0.4,
                0.05,
            ),
            rule(
                3,
                vec![Condition::new("z1", Op::Gt, 0.0), Condition::new("z2", Op::Gt, 0.5)],
                0.1,
                0.12,
            ),
        ],
        standardized(&["z1", "z2", "z3"]),
    )
}

/// One regime everywhere.
pub fn single_regime(beta0: f64, beta1: f64) -> SyntheticTruth {
    let mut t = truth(vec![rule(1, vec![], beta0, beta1)], standardized(&["z"]));
    t.sigma_b = 0.0;
    t
}

/// Clustered visits whose response varies smoothly with the covariates:
/// `0.4 sin(1.5 z1) + (0.15 + 0.05 z2) · dose + b + e`. No finite tree is
/// exact here, which is where averaging trees pays off.
pub fn smooth_response(n_clusters: usize, visits: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_dist = Normal::new(0.0, 0.3).expect("valid sd");
    let e_dist = Normal::new(0.0, 0.2).expect("valid sd");
    let start = NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date");
    let mut records = Vec::with_capacity(n_clusters * visits);
    for i in 0..n_clusters {
        let b = b_dist.sample(&mut rng);
        let offset = rng.random_range(0..56);
        for v in 0..visits {
            let z1 = rng.random_range(-UNIT_HALF_WIDTH..UNIT_HALF_WIDTH);
            let z2 = rng.random_range(-UNIT_HALF_WIDTH..UNIT_HALF_WIDTH);
            let z3 = rng.random_range(-UNIT_HALF_WIDTH..UNIT_HALF_WIDTH);
            let dose = rng.random_range(0.0..8.0);
            let y = 0.4 * (1.5 * z1).sin() + (0.15 + 0.05 * z2) * dose + b + e_dist.sample(&mut rng);
            records.push(VisitRecord::observed(
                format!("{:04}", i + 1),
                start + Duration::days(offset + 14 * v as i64),
                vec![Some(z1), Some(z2), Some(z3), Some(dose)],
                Some(y),
            ));
        }
    }
    let schema = ["z1", "z2", "z3", DOSE].iter().map(|s| s.to_string()).collect();
    Dataset::new(schema, TARGET_COLUMN, records).expect("generated keys are unique")
}

/// Training data whose targets are wrong in one covariate region, so the
/// initial fit learns the corruption; the later test visits are clean.
#[derive(Debug, Clone)]
pub struct MisspecifiedScenario {
    pub truth: SyntheticTruth,
    pub train: Dataset,
    pub test: Dataset,
    /// Region whose training targets were shifted.
    pub region: Condition,
    pub shift: f64,
}

/// Three-regime truth with training targets shifted by −1 where
/// `z1 > 0.8`. Visits after 70% of the observation span form the test set.
pub fn misspecified_start(n_clusters: usize, seed: u64) -> Result<MisspecifiedScenario, DatasetError> {
    let mut truth = three_leaf();
    truth.n_clusters = n_clusters;
    let (data, truth) = generate_synthetic(&truth, seed)?;
    let span = truth.visit_interval_days * truth.visits_per_cluster as i64;
    let cutoff = truth.start_date + Duration::days(span * 7 / 10);
    let split = temporal_split(&data, cutoff);
    let region = Condition::new("z1", Op::Gt, 0.8);
    let shift = -1.0;
    let j = split.train.feature_index(&region.feature)?;
    let records = split
        .train
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.features[j].is_some_and(|v| region.holds(v)) {
                r.target = r.target.map(|t| t + shift);
            }
            r
        })
        .collect();
    let train = Dataset::new(split.train.schema().to_vec(), TARGET_COLUMN, records)?;
    Ok(MisspecifiedScenario {
        truth,
        train,
        test: split.test,
        region,
        shift,
    })
}
