//! IF-THEN rules extracted from trees, rule-membership encoding, expert
//! edits and synthetic sampling from edited rules.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureRange, Origin, VisitRecord};
use crate::glmmtree::{GlmmTreeFit, NodeModel};
use crate::trees::{RegressionTree, Tree};

/// Minimum analytic acceptance rate for rejection sampling.
pub const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("rule {0} not found")]
    UnknownRule(u32),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("rule {id} is unsatisfiable on `{feature}`")]
    Unsatisfiable { id: u32, feature: String },
    #[error("rule {id} has no condition on `{feature}`{}", op.map(|o| format!(" with op {o}")).unwrap_or_default())]
    NoSuchCondition {
        id: u32,
        feature: String,
        op: Option<Op>,
    },
    #[error("rule {id} has several conditions on `{feature}`; give an op")]
    AmbiguousCondition { id: u32, feature: String },
    #[error("non-finite threshold for `{0}`")]
    NonFiniteThreshold(String),
    #[error("model has {got} slopes for {expected} regressors")]
    ModelShape { expected: usize, got: usize },
    #[error("infeasible region for rule {id}: acceptance rate {rate:e}")]
    InfeasibleRegion { id: u32, rate: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, RuleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Le,
    Gt,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Le => "≤",
            Op::Gt => ">",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    pub op: Op,
    pub threshold: f64,
}

impl Condition {
    pub fn new(feature: impl Into<String>, op: Op, threshold: f64) -> Self {
        Self {
            feature: feature.into(),
            op,
            threshold,
        }
    }

    /// Missing (`NaN`) values satisfy nothing.
    pub fn holds(&self, v: f64) -> bool {
        match self.op {
            Op::Le => v <= self.threshold,
            Op::Gt => v > self.threshold,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.feature, self.op, self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Learned,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: u32,
    pub conditions: Vec<Condition>,
    pub model: NodeModel,
    pub support: u64,
    pub provenance: Provenance,
}

/// Half-open interval `(low, high]` implied by a rule on one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Bounds {
    pub fn is_empty(&self) -> bool {
        self.low >= self.high
    }

    fn overlaps(&self, other: &Bounds) -> bool {
        self.low.max(other.low) < self.high.min(other.high)
    }
}

impl Rule {
    /// `None` when a needed feature is missing for this point.
    pub fn matches(&self, value: impl Fn(&str) -> Option<f64>) -> Option<bool> {
        let mut all = true;
        for c in &self.conditions {
            let v = value(&c.feature).filter(|v| !v.is_nan())?;
            all &= c.holds(v);
        }
        Some(all)
    }

    /// Per-feature bounds, in first-mention order.
    pub fn bounds(&self) -> Vec<(String, Bounds)> {
        let mut out: Vec<(String, Bounds)> = Vec::new();
        for c in &self.conditions {
            let at = match out.iter().position(|(f, _)| f == &c.feature) {
                Some(i) => i,
                None => {
                    out.push((
                        c.feature.clone(),
                        Bounds {
                            low: f64::NEG_INFINITY,
                            high: f64::INFINITY,
                        },
                    ));
                    out.len() - 1
                }
            };
            let b = &mut out[at].1;
            match c.op {
                Op::Le => b.high = b.high.min(c.threshold),
                Op::Gt => b.low = b.low.max(c.threshold),
            }
        }
        out
    }

    /// First feature whose conditions cannot hold together.
    pub fn unsatisfiable_feature(&self) -> Option<String> {
        self.bounds()
            .into_iter()
            .find(|(_, b)| b.is_empty())
            .map(|(f, _)| f)
    }

    /// Whether some point satisfies both rules.
    pub fn intersects(&self, other: &Rule) -> bool {
        let mine = self.bounds();
        let theirs = other.bounds();
        if mine.iter().chain(&theirs).any(|(_, b)| b.is_empty()) {
            return false;
        }
        mine.iter().all(|(f, b)| {
            theirs
                .iter()
                .find(|(g, _)| g == f)
                .is_none_or(|(_, c)| b.overlaps(c))
        })
    }

    /// Display text in the `IF … ∧ … THEN ΔĤb = β0 + β1 * DOSE` layout.
    pub fn text(&self, regressors: &[String]) -> String {
        let mut s = String::from("IF ");
        if self.conditions.is_empty() {
            s.push_str("TRUE");
        }
        for (k, c) in self.conditions.iter().enumerate() {
            if k > 0 {
                s.push_str(" ∧ ");
            }
            s.push_str(&c.to_string());
        }
        s.push_str(&format!(" THEN ΔĤb = {}", self.model.beta0));
        for (b, r) in self.model.beta1.iter().zip(regressors) {
            if b.is_sign_negative() {
                s.push_str(&format!(" - {} * {r}", -b));
            } else {
                s.push_str(&format!(" + {b} * {r}"));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: u64,
    pub regressors: Vec<String>,
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn get(&self, id: u32) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Features mentioned by any condition, sorted.
    pub fn features(&self) -> Vec<String> {
        let mut f: Vec<String> = self
            .rules
            .iter()
            .flat_map(|r| r.conditions.iter().map(|c| c.feature.clone()))
            .collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rule sets serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Index of the first rule a point satisfies.
    pub fn locate(&self, value: impl Fn(&str) -> Option<f64>) -> Option<usize> {
        self.rules
            .iter()
            .position(|r| r.matches(&value) == Some(true))
    }
}

/// Leaf payloads that can be shown as a rule model.
pub trait LeafModel {
    fn node_model(&self) -> NodeModel;
}

impl LeafModel for f64 {
    fn node_model(&self) -> NodeModel {
        NodeModel {
            beta0: *self,
            beta1: Vec::new(),
        }
    }
}

impl LeafModel for NodeModel {
    fn node_model(&self) -> NodeModel {
        self.clone()
    }
}

/// One rule per leaf in depth-first order, ids starting at 1. Repeated
/// conditions on the same feature and direction collapse to the tightest.
pub fn rules_from_tree<L: LeafModel>(tree: &Tree<L>, regressors: &[String], version: u64) -> RuleSet {
    let rules = tree
        .paths()
        .into_iter()
        .enumerate()
        .map(|(k, (leaf, path))| {
            let mut conditions: Vec<Condition> = Vec::new();
            for (f, op, t) in path {
                let name = &tree.features[f];
                match conditions
                    .iter_mut()
                    .find(|c| &c.feature == name && c.op == op)
                {
                    Some(c) => {
                        c.threshold = match op {
                            Op::Le => c.threshold.min(t),
                            Op::Gt => c.threshold.max(t),
                        }
                    }
                    None => conditions.push(Condition::new(name.clone(), op, t)),
                }
            }
            let (model, n) = match &tree.nodes[leaf] {
                crate::trees::Node::Leaf { model, n, .. } => (model.node_model(), *n),
                crate::trees::Node::Split { .. } => unreachable!("paths end at leaves"),
            };
            Rule {
                id: k as u32 + 1,
                conditions,
                model,
                support: n as u64,
                provenance: Provenance::Learned,
            }
        })
        .collect();
    RuleSet {
        version,
        regressors: regressors.to_vec(),
        rules,
    }
}

/// Fitted trees that can be read as rule sets.
pub trait ToRules {
    fn to_rules(&self) -> RuleSet;
}

impl ToRules for RegressionTree {
    fn to_rules(&self) -> RuleSet {
        rules_from_tree(&self.tree, &[], 0)
    }
}

impl ToRules for GlmmTreeFit {
    fn to_rules(&self) -> RuleSet {
        rules_from_tree(&self.tree, &self.regressors, 0)
    }
}

pub fn extract_rules(t: &impl ToRules) -> RuleSet {
    t.to_rules()
}

/// Rule membership of a batch of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub rule_ids: Vec<u32>,
    /// `rows × rules`, entries 0 or 1.
    pub membership: Vec<Vec<u8>>,
    /// Rows where a condition could not be evaluated for a missing value.
    pub flagged: Vec<usize>,
}

impl Encoding {
    pub fn row_sums(&self) -> Vec<u32> {
        self.membership
            .iter()
            .map(|r| r.iter().map(|&v| v as u32).sum())
            .collect()
    }
}

/// Membership of each row of `x` (columns named by `names`) in each rule.
pub fn encode(rs: &RuleSet, names: &[String], x: &DMatrix<f64>) -> Result<Encoding> {
    if names.len() != x.ncols() {
        return Err(RuleError::InvalidArgument(format!(
            "{} names for {} columns",
            names.len(),
            x.ncols()
        )));
    }
    let mut cols: BTreeMap<&str, usize> = BTreeMap::new();
    for f in rs.features() {
        let j = names
            .iter()
            .position(|n| n == &f)
            .ok_or_else(|| RuleError::UnknownFeature(f.clone()))?;
        cols.insert(names[j].as_str(), j);
    }
    let mut membership = Vec::with_capacity(x.nrows());
    let mut flagged = Vec::new();
    for i in 0..x.nrows() {
        let lookup = |f: &str| cols.get(f).map(|&j| x[(i, j)]);
        let mut row = Vec::with_capacity(rs.rules.len());
        let mut missing = false;
        for r in &rs.rules {
            match r.matches(lookup) {
                Some(m) => row.push(m as u8),
                None => {
                    missing = true;
                    row.push(0);
                }
            }
        }
        if missing {
            flagged.push(i);
        }
        membership.push(row);
    }
    Ok(Encoding {
        rule_ids: rs.rules.iter().map(|r| r.id).collect(),
        membership,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EditOp {
    /// Moves the threshold of the condition on `feature`; `op` selects
    /// among several conditions on the same feature.
    ModifyThreshold {
        feature: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        op: Option<Op>,
        threshold: f64,
    },
    AddCondition {
        condition: Condition,
    },
    RemoveCondition {
        feature: String,
        op: Op,
    },
    SetModel {
        model: NodeModel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEdit {
    pub rule_id: u32,
    pub operations: Vec<EditOp>,
    pub author: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Pairs of rule ids that share some point.
    pub overlaps: Vec<(u32, u32)>,
    /// Sample rows covered by no rule.
    pub gaps: Vec<usize>,
    pub unsatisfiable: Vec<u32>,
    /// Number of sample points checked for gaps.
    pub n_checked: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty() && self.gaps.is_empty() && self.unsatisfiable.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub rules: RuleSet,
    pub report: ValidationReport,
}

/// Applies an edit and returns a new rule set; `rs` is left untouched.
/// `known_features` is the schema that added conditions may refer to.
pub fn apply_edit(rs: &RuleSet, edit: &RuleEdit, known_features: &[String]) -> Result<EditOutcome> {
    let at = rs
        .rules
        .iter()
        .position(|r| r.id == edit.rule_id)
        .ok_or(RuleError::UnknownRule(edit.rule_id))?;
    let mut out = rs.clone();
    if edit.operations.is_empty() {
        let report = analytic_report(&out);
        return Ok(EditOutcome { rules: out, report });
    }
    let id = edit.rule_id;
    let rule = &mut out.rules[at];
    for op in &edit.operations {
        match op {
            EditOp::ModifyThreshold {
                feature,
                op,
                threshold,
            } => {
                if !threshold.is_finite() {
                    return Err(RuleError::NonFiniteThreshold(feature.clone()));
                }
                let hits: Vec<usize> = rule
                    .conditions
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| &c.feature == feature && op.is_none_or(|o| o == c.op))
                    .map(|(k, _)| k)
                    .collect();
                match hits.as_slice() {
                    [] => {
                        return Err(RuleError::NoSuchCondition {
                            id,
                            feature: feature.clone(),
                            op: *op,
                        })
                    }
                    [k] => rule.conditions[*k].threshold = *threshold,
                    _ => {
                        return Err(RuleError::AmbiguousCondition {
                            id,
                            feature: feature.clone(),
                        })
                    }
                }
            }
            EditOp::AddCondition { condition } => {
                if !known_features.contains(&condition.feature) {
                    return Err(RuleError::UnknownFeature(condition.feature.clone()));
                }
                if !condition.threshold.is_finite() {
                    return Err(RuleError::NonFiniteThreshold(condition.feature.clone()));
                }
                rule.conditions.push(condition.clone());
            }
            EditOp::RemoveCondition { feature, op } => {
                let before = rule.conditions.len();
                rule.conditions
                    .retain(|c| !(&c.feature == feature && c.op == *op));
                if rule.conditions.len() == before {
                    return Err(RuleError::NoSuchCondition {
                        id,
                        feature: feature.clone(),
                        op: Some(*op),
                    });
                }
            }
            EditOp::SetModel { model } => {
                if model.beta1.len() != out.regressors.len() {
                    return Err(RuleError::ModelShape {
                        expected: out.regressors.len(),
                        got: model.beta1.len(),
                    });
                }
                if !model.beta0.is_finite() || model.beta1.iter().any(|b| !b.is_finite()) {
                    return Err(RuleError::InvalidArgument("non-finite model coefficient".into()));
                }
                rule.model = model.clone();
            }
        }
    }
    if let Some(feature) = rule.unsatisfiable_feature() {
        return Err(RuleError::Unsatisfiable { id, feature });
    }
    rule.provenance = Provenance::Edited;
    let report = analytic_report(&out);
    Ok(EditOutcome { rules: out, report })
}

/// Overlaps and unsatisfiable rules decided exactly from the bounds.
pub fn analytic_report(rs: &RuleSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (k, a) in rs.rules.iter().enumerate() {
        if a.unsatisfiable_feature().is_some() {
            report.unsatisfiable.push(a.id);
            continue;
        }
        for b in &rs.rules[k + 1..] {
            if a.intersects(b) {
                report.overlaps.push((a.id, b.id));
            }
        }
    }
    report
}

/// Monte-Carlo check of a rule set over sample points.
pub fn validate(rs: &RuleSet, names: &[String], sample: &DMatrix<f64>) -> Result<ValidationReport> {
    let enc = encode(rs, names, sample)?;
    let mut report = ValidationReport {
        unsatisfiable: rs
            .rules
            .iter()
            .filter(|r| r.unsatisfiable_feature().is_some())
            .map(|r| r.id)
            .collect(),
        n_checked: sample.nrows(),
        ..Default::default()
    };
    let m = rs.rules.len();
    let mut seen = vec![vec![false; m]; m];
    for (i, row) in enc.membership.iter().enumerate() {
        let hit: Vec<usize> = (0..m).filter(|&k| row[k] == 1).collect();
        if hit.is_empty() {
            report.gaps.push(i);
        }
        for (a, &ka) in hit.iter().enumerate() {
            for &kb in &hit[a + 1..] {
                seen[ka][kb] = true;
            }
        }
    }
    for (ka, row) in seen.iter().enumerate() {
        for (kb, &s) in row.iter().enumerate() {
            if s {
                report.overlaps.push((rs.rules[ka].id, rs.rules[kb].id));
            }
        }
    }
    Ok(report)
}

/// Uniform sample over a box, columns in `ranges` order.
pub fn sample_box(ranges: &[FeatureRange], n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, ranges.len(), |_, _| 0.0).map_with_location(|_, j, _| {
        let r = &ranges[j];
        if r.high > r.low {
            rng.random_range(r.low..r.high)
        } else {
            r.low
        }
    })
}

/// Fraction of the box covered by a rule.
pub fn acceptance_rate(rule: &Rule, ranges: &[FeatureRange]) -> Result<f64> {
    let mut rate = 1.0;
    for (f, b) in rule.bounds() {
        let r = ranges
            .iter()
            .find(|r| r.name == f)
            .ok_or_else(|| RuleError::UnknownFeature(f.clone()))?;
        let frac = if r.high > r.low {
            let lo = b.low.max(r.low);
            let hi = b.high.min(r.high);
            ((hi - lo) / (r.high - r.low)).max(0.0)
        } else if r.low > b.low && r.low <= b.high {
            1.0
        } else {
            0.0
        };
        rate *= frac;
    }
    Ok(rate)
}

/// Options for [`sample_from_rule`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec<'a> {
    /// Box to sample from, in dataset schema order.
    pub ranges: &'a [FeatureRange],
    /// Names of the model regressors, each one of `ranges`.
    pub regressors: &'a [String],
    pub n: usize,
    pub noise_sd: f64,
    pub weight: f64,
    pub care_date: NaiveDate,
    pub seed: u64,
}

/// Rejection-samples `n` synthetic visits inside a rule. Each row gets its
/// own patient id so no random intercept is shared with real patients.
pub fn sample_from_rule(rule: &Rule, spec: &SampleSpec<'_>) -> Result<Vec<VisitRecord>> {
    if spec.n == 0 {
        return Err(RuleError::InvalidArgument("n must be >= 1".into()));
    }
    if !(spec.noise_sd >= 0.0) || !(spec.weight > 0.0) {
        return Err(RuleError::InvalidArgument("noise_sd must be >= 0 and weight > 0".into()));
    }
    if rule.model.beta1.len() != spec.regressors.len() {
        return Err(RuleError::ModelShape {
            expected: spec.regressors.len(),
            got: rule.model.beta1.len(),
        });
    }
    let reg_idx = spec
        .regressors
        .iter()
        .map(|r| {
            spec.ranges
                .iter()
                .position(|x| &x.name == r)
                .ok_or_else(|| RuleError::UnknownFeature(r.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rate = acceptance_rate(rule, spec.ranges)?;
    if rate < MIN_ACCEPTANCE {
        return Err(RuleError::InfeasibleRegion { id: rule.id, rate });
    }
    let cond_idx: Vec<(usize, &Condition)> = rule
        .conditions
        .iter()
        .map(|c| (spec.ranges.iter().position(|r| r.name == c.feature).unwrap(), c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).expect("sd checked");
    let mut out = Vec::with_capacity(spec.n);
    let mut point = vec![0.0; spec.ranges.len()];
    let max_draws = ((spec.n as f64 / rate) * 100.0).ceil() as u64 + 1000;
    let mut draws = 0u64;
    while out.len() < spec.n {
        draws += 1;
        if draws > max_draws {
            return Err(RuleError::InfeasibleRegion { id: rule.id, rate });
        }
        for (x, r) in point.iter_mut().zip(spec.ranges) {
            *x = if r.high > r.low {
                rng.random_range(r.low..r.high)
            } else {
                r.low
            };
        }
        if !cond_idx.iter().all(|(j, c)| c.holds(point[*j])) {
            continue;
        }
        let regs: Vec<f64> = reg_idx.iter().map(|&j| point[j]).collect();
        let target = rule.model.eval(&regs) + noise.sample(&mut rng);
        out.push(VisitRecord {
            patient_id: format!("synthetic-r{}-{:05}-{:016x}", rule.id, out.len(), spec.seed),
            care_date: spec.care_date,
            features: point.iter().map(|&v| Some(v)).collect(),
            target: Some(target),
            weight: spec.weight,
            origin: Origin::Synthetic,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: u32, conditions: Vec<Condition>) -> Rule {
        Rule {
            id,
            conditions,
            model: NodeModel {
                beta0: 0.5,
                beta1: vec![0.1],
            },
            support: 10,
            provenance: Provenance::Learned,
        }
    }

    fn set(rules: Vec<Rule>) -> RuleSet {
        RuleSet {
            version: 1,
            regressors: vec!["dose".into()],
            rules,
        }
    }

    #[test]
    fn empty_rule_is_all_ones() {
        let rs = set(vec![rule(1, vec![])]);
        let x = DMatrix::from_element(5, 1, 3.0);
        let enc = encode(&rs, &["z".into()], &x).unwrap();
        assert!(enc.membership.iter().all(|r| r == &vec![1]));
    }

    #[test]
    fn threshold_boundary_satisfies_le() {
        let c = Condition::new("z", Op::Le, 0.3);
        assert!(c.holds(0.3));
        assert!(!Condition::new("z", Op::Gt, 0.3).holds(0.3));
        assert!(!c.holds(f64::NAN));
    }

    #[test]
    fn missing_values_are_flagged() {
        let rs = set(vec![rule(1, vec![Condition::new("z", Op::Le, 0.0)])]);
        let x = DMatrix::from_column_slice(2, 1, &[1.0, f64::NAN]);
        let enc = encode(&rs, &["z".into()], &x).unwrap();
        assert_eq!(enc.flagged, vec![1]);
    }

    #[test]
    fn unknown_feature_in_encode() {
        let rs = set(vec![rule(1, vec![Condition::new("q", Op::Le, 0.0)])]);
        let x = DMatrix::from_element(1, 1, 0.0);
        assert_eq!(
            encode(&rs, &["z".into()], &x).unwrap_err(),
            RuleError::UnknownFeature("q".into())
        );
    }

    #[test]
    fn unsatisfiable_edit_rejected() {
        let rs = set(vec![rule(1, vec![Condition::new("x", Op::Le, 1.0)])]);
        let edit = RuleEdit {
            rule_id: 1,
            operations: vec![EditOp::AddCondition {
                condition: Condition::new("x", Op::Gt, 2.0),
            }],
            author: "r1".into(),
            timestamp: Utc::now(),
        };
        assert_eq!(
            apply_edit(&rs, &edit, &["x".into()]).unwrap_err(),
            RuleError::Unsatisfiable {
                id: 1,
                feature: "x".into()
            }
        );
    }

    #[test]
    fn identity_edit_keeps_provenance() {
        let rs = set(vec![rule(1, vec![])]);
        let edit = RuleEdit {
            rule_id: 1,
            operations: vec![],
            author: "r1".into(),
            timestamp: Utc::now(),
        };
        let out = apply_edit(&rs, &edit, &[]).unwrap();
        assert_eq!(out.rules, rs);
    }

    #[test]
    fn duplicate_rules_overlap() {
        let r = rule(1, vec![Condition::new("x", Op::Le, 0.0)]);
        let mut r2 = r.clone();
        r2.id = 2;
        let rs = set(vec![r, r2]);
        assert_eq!(analytic_report(&rs).overlaps, vec![(1, 2)]);
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let rep = validate(&rs, &["x".into()], &x).unwrap();
        assert_eq!(rep.overlaps, vec![(1, 2)]);
        assert_eq!(rep.gaps, vec![2]);
    }

    #[test]
    fn infeasible_region_detected() {
        let r = rule(3, vec![Condition::new("x", Op::Gt, 5.0)]);
        let ranges = vec![FeatureRange::new("x", 0.0, 1.0), FeatureRange::new("dose", 0.0, 8.0)];
        let spec = SampleSpec {
            ranges: &ranges,
            regressors: &["dose".into()],
            n: 5,
            noise_sd: 0.0,
            weight: 1.0,
            care_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            seed: 1,
        };
        assert!(matches!(
            sample_from_rule(&r, &spec),
            Err(RuleError::InfeasibleRegion { id: 3, .. })
        ));
    }

    #[test]
    fn noiseless_samples_lie_on_the_line() {
        let r = rule(2, vec![Condition::new("x", Op::Le, 0.5)]);
        let ranges = vec![FeatureRange::new("x", 0.0, 1.0), FeatureRange::new("dose", 0.0, 8.0)];
        let spec = SampleSpec {
            ranges: &ranges,
            regressors: &["dose".into()],
            n: 40,
            noise_sd: 0.0,
            weight: 0.5,
            care_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            seed: 7,
        };
        let rows = sample_from_rule(&r, &spec).unwrap();
        assert_eq!(rows.len(), 40);
        for v in &rows {
            let x = v.features[0].unwrap();
            let dose = v.features[1].unwrap();
            assert!(x <= 0.5);
            assert_eq!(v.target.unwrap(), 0.5 + 0.1 * dose);
            assert_eq!(v.origin, Origin::Synthetic);
            assert_eq!(v.weight, 0.5);
        }
        assert_eq!(rows, sample_from_rule(&r, &spec).unwrap());
    }

    #[test]
    fn text_uses_minus_for_negative_slopes() {
        let mut r = rule(1, vec![Condition::new("a", Op::Gt, -0.1)]);
        r.model = NodeModel {
            beta0: -0.5,
            beta1: vec![-0.25],
        };
        assert_eq!(r.text(&["D".into()]), "IF a > -0.1 THEN ΔĤb = -0.5 - 0.25 * D");
    }
}
