//! The expert-in-the-loop cycle: evaluate, gate advice on rater agreement,
//! merge it into the training data, refit and record a new version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{self, AgreementError, GateResult, RatingsMatrix};
use crate::dataset::{Dataset, DatasetError, Origin, SyntheticTruth, VisitRecord};
use crate::glmmtree::{
    default_partitioners, fit_bagged_glmm_tree, fit_glmm_tree, BaggedGlmmTree, BaggedParams,
    GlmmTreeError, GlmmTreeFit, GlmmTreeParams, MixedPredictor,
};
use crate::lmm::PredictMode;
use crate::rules::{
    apply_edit, encode, extract_rules, sample_from_rule, Condition, EditOp, Rule, RuleEdit,
    RuleError, RuleSet, SampleSpec,
};
use crate::scenarios::DOSE;
use crate::sub_seed;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] GlmmTreeError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error("evaluation needs at least one prediction")]
    Empty,
    #[error("{predictions} predictions for {truths} targets")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("invalid advice: {0}")]
    InvalidAdvice(String),
    #[error("reliability gate failed: {0}")]
    GateFailed(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LoopError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    pub split: String,
}

/// Unweighted MAE and RMSE.
pub fn evaluate(predictions: &[f64], truths: &[f64], split: &str) -> Result<EvalMetrics> {
    evaluate_weighted(predictions, truths, &vec![1.0; truths.len()], split)
}

/// Weighted MAE and RMSE: `Σ w|e| / Σ w` and `sqrt(Σ w e² / Σ w)`.
pub fn evaluate_weighted(predictions: &[f64], truths: &[f64], weights: &[f64], split: &str) -> Result<EvalMetrics> {
    if predictions.len() != truths.len() || weights.len() != truths.len() {
        return Err(LoopError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(LoopError::Empty);
    }
    let total: f64 = weights.iter().sum();
    let mut abs = 0.0;
    let mut sq = 0.0;
    for ((p, t), w) in predictions.iter().zip(truths).zip(weights) {
        let e = p - t;
        abs += w * e.abs();
        sq += w * e * e;
    }
    let mae = abs / total;
    // The inequality is exact in real arithmetic; rounding can break it by an ulp.
    let rmse = (sq / total).sqrt().max(mae);
    Ok(EvalMetrics {
        mae,
        rmse,
        n: truths.len(),
        split: split.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdviceKind {
    DoseSuggestion,
    TargetCorrection,
    RuleEditRef,
}

/// One piece of expert advice about a displayed visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviceRecord {
    pub patient_id: String,
    pub care_date: NaiveDate,
    /// Feature values the rater saw.
    #[serde(default)]
    pub x_snapshot: BTreeMap<String, f64>,
    pub y_hat: f64,
    pub rule_id: Option<u32>,
    /// Advised dose or corrected ΔHb; absent for edit references.
    pub advice: Option<f64>,
    pub advice_kind: AdviceKind,
    /// Staged edit referenced by a `rule-edit-ref` record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_id: Option<u64>,
    pub rater_id: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub model_version: u64,
}

impl AdviceRecord {
    /// Checks numeric advice is finite and edit references resolve.
    pub fn validate(&self, edit_ids: &BTreeSet<u64>) -> Result<()> {
        if self.rater_id.trim().is_empty() {
            return Err(LoopError::InvalidAdvice("rater_id is empty".into()));
        }
        match self.advice_kind {
            AdviceKind::RuleEditRef => match self.edit_id {
                Some(id) if edit_ids.contains(&id) => Ok(()),
                Some(id) => Err(LoopError::InvalidAdvice(format!("unknown edit {id}"))),
                None => Err(LoopError::InvalidAdvice("rule-edit-ref without edit_id".into())),
            },
            _ => match self.advice {
                Some(a) if a.is_finite() => Ok(()),
                _ => Err(LoopError::InvalidAdvice(format!(
                    "{:?} advice for {} must be finite",
                    self.advice_kind, self.patient_id
                ))),
            },
        }
    }

    fn unit(&self) -> String {
        format!("{}@{}", self.patient_id, self.care_date)
    }
}

/// A rule edit waiting for the next iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedEdit {
    pub id: u64,
    pub edit: RuleEdit,
}

/// A staged edit together with the rule it produced when accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEdit {
    pub id: u64,
    pub edit: RuleEdit,
    pub rule: Rule,
}

/// Advice submitted between two iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdviceBatch {
    pub records: Vec<AdviceRecord>,
    pub edits: Vec<StagedEdit>,
}

impl AdviceBatch {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.edits.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u64> = self.edits.iter().map(|e| e.id).collect();
        if ids.len() != self.edits.len() {
            return Err(LoopError::InvalidAdvice("duplicate edit id".into()));
        }
        self.records.iter().try_for_each(|r| r.validate(&ids))
    }
}

/// Advice merged at one version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedBatch {
    pub version: u64,
    pub records: Vec<AdviceRecord>,
    pub edits: Vec<ResolvedEdit>,
}

impl AcceptedBatch {
    /// The batch as it was submitted.
    pub fn as_submitted(&self) -> AdviceBatch {
        AdviceBatch {
            records: self.records.clone(),
            edits: self
                .edits
                .iter()
                .map(|e| StagedEdit {
                    id: e.id,
                    edit: e.edit.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePolicy {
    pub advice_weight: f64,
    pub samples_per_rule: usize,
    /// Append rule-membership indicator columns as features.
    pub rule_features: bool,
    pub dose_feature: String,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            advice_weight: 1.0,
            samples_per_rule: 50,
            rule_features: false,
            dose_feature: DOSE.to_string(),
        }
    }
}

/// Feature values of the visit an advice record refers to: the stored
/// observed row when present, else the snapshot the rater saw.
fn shown_row(train: &Dataset, rec: &AdviceRecord) -> Vec<Option<f64>> {
    match train.find(&rec.patient_id, rec.care_date) {
        Some(r) => r.features.clone(),
        None => train
            .schema()
            .iter()
            .map(|f| rec.x_snapshot.get(f).copied())
            .collect(),
    }
}

/// Mean numeric advice per visit, keyed by (patient, date).
fn averaged(records: &[AdviceRecord], kind: AdviceKind) -> BTreeMap<(String, NaiveDate), (f64, usize, usize)> {
    let mut out: BTreeMap<(String, NaiveDate), (f64, usize, usize)> = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        if r.advice_kind != kind {
            continue;
        }
        if let Some(a) = r.advice {
            let e = out
                .entry((r.patient_id.clone(), r.care_date))
                .or_insert((0.0, 0, k));
            e.0 += a;
            e.1 += 1;
        }
    }
    for v in out.values_mut() {
        v.0 /= v.1 as f64;
    }
    out
}

/// Appends advice-derived rows to `train`. Original rows are untouched.
///
/// Target corrections become one row per visit (raters averaged) carrying
/// the corrected target. Dose suggestions become a row at the advised dose
/// with the observed target, and are skipped when no target was observed.
/// Each edit adds `samples_per_rule` rows drawn from its edited rule.
pub fn merge_advice(
    train: &Dataset,
    records: &[AdviceRecord],
    edits: &[ResolvedEdit],
    regressors: &[String],
    policy: &MergePolicy,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if records.is_empty() && edits.is_empty() {
        return Ok(train.clone());
    }
    let mut extra = Vec::new();
    for ((pid, date), (a, _, first)) in averaged(records, AdviceKind::TargetCorrection) {
        extra.push(VisitRecord {
            patient_id: pid,
            care_date: date,
            features: shown_row(train, &records[first]),
            target: Some(a),
            weight: policy.advice_weight,
            origin: Origin::Advice,
        });
    }
    for ((pid, date), (a, _, _)) in averaged(records, AdviceKind::DoseSuggestion) {
        let Some(row) = train.find(&pid, date) else { continue };
        let Some(target) = row.target else { continue };
        let mut features = row.features.clone();
        features[train.feature_index(&policy.dose_feature)?] = Some(a);
        extra.push(VisitRecord {
            patient_id: pid,
            care_date: date,
            features,
            target: Some(target),
            weight: policy.advice_weight,
            origin: Origin::Advice,
        });
    }
    if !edits.is_empty() {
        let ranges = train.feature_ranges();
        let care_date = train.max_date().unwrap_or(NaiveDate::MIN);
        for e in edits {
            let spec = SampleSpec {
                ranges: &ranges,
                regressors,
                n: policy.samples_per_rule,
                noise_sd,
                weight: policy.advice_weight,
                care_date,
                seed: sub_seed(seed, e.id),
            };
            extra.extend(sample_from_rule(&e.rule, &spec)?);
        }
    }
    Ok(train.with_records(extra)?)
}

/// Column name of a rule-membership feature.
pub fn rule_feature_name(id: u32) -> String {
    format!("rule_{id}")
}

/// Appends one 0/1 membership column per rule; rows whose membership
/// depends on a missing value get missing entries.
pub fn append_rule_features(d: &Dataset, rs: &RuleSet) -> Result<Dataset> {
    let x = d.matrix(&d.schema().to_vec())?;
    let enc = encode(rs, d.schema(), &x)?;
    let flagged: BTreeSet<usize> = enc.flagged.iter().copied().collect();
    let mut out = d.clone();
    for (k, id) in enc.rule_ids.iter().enumerate() {
        let col = (0..d.n_records())
            .map(|i| (!flagged.contains(&i)).then(|| enc.membership[i][k] as f64))
            .collect();
        out = out.with_column(&rule_feature_name(*id), col)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatePolicy {
    pub threshold: f64,
    pub replicates: usize,
    pub level: f64,
    /// Reject numeric advice that no two raters gave for the same visit.
    pub require_pairable: bool,
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            threshold: agreement::DEFAULT_THRESHOLD,
            replicates: agreement::DEFAULT_REPLICATES,
            level: agreement::DEFAULT_LEVEL,
            require_pairable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub pass: bool,
    pub per_kind: BTreeMap<AdviceKind, GateResult>,
    pub reason: Option<String>,
}

/// Visits × raters matrix of one kind of numeric advice.
pub fn ratings_for(records: &[AdviceRecord], kind: AdviceKind) -> std::result::Result<RatingsMatrix, AgreementError> {
    RatingsMatrix::from_long(
        records
            .iter()
            .filter(|r| r.advice_kind == kind)
            .map(|r| (r.unit(), r.rater_id.clone(), r.advice)),
    )
}

/// Agreement gate over each numeric advice kind in the batch. Batches
/// without numeric advice pass.
pub fn gate_batch(records: &[AdviceRecord], policy: &GatePolicy, seed: u64) -> Result<GateReport> {
    let kinds: BTreeSet<AdviceKind> = records
        .iter()
        .map(|r| r.advice_kind)
        .filter(|k| *k != AdviceKind::RuleEditRef)
        .collect();
    let mut per_kind = BTreeMap::new();
    let mut reason = None;
    for kind in kinds {
        let m = match ratings_for(records, kind) {
            Ok(m) => m,
            Err(AgreementError::NotPairable) if !policy.require_pairable => continue,
            Err(e) => {
                reason.get_or_insert(format!("{kind:?}: {e}"));
                continue;
            }
        };
        let g = agreement::reliability_gate(&m, policy.threshold, policy.replicates, policy.level, seed)?;
        if !g.pass {
            reason.get_or_insert(format!(
                "{kind:?}: alpha {:.4} below {}",
                g.result.alpha, policy.threshold
            ));
        }
        per_kind.insert(kind, g);
    }
    Ok(GateReport {
        pass: reason.is_none(),
        per_kind,
        reason,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Single,
    Bagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every refit uses the configured seed.
    Pinned,
    /// Version `v` refits with `sub_seed(seed, v)`.
    PerVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub regressors: Vec<String>,
    /// Partitioning features; `None` uses every non-regressor column.
    pub partitioners: Option<Vec<String>>,
    pub model: ModelKind,
    pub bagged_trees: usize,
    pub tree: GlmmTreeParams,
    pub merge: MergePolicy,
    pub gate: GatePolicy,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
    pub max_versions: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            regressors: vec![DOSE.to_string()],
            partitioners: None,
            model: ModelKind::Single,
            bagged_trees: 25,
            tree: GlmmTreeParams::default(),
            merge: MergePolicy::default(),
            gate: GatePolicy::default(),
            seed: 0,
            seed_policy: SeedPolicy::PerVersion,
            max_versions: None,
        }
    }
}

impl LoopConfig {
    pub fn seed_for(&self, version: u64) -> u64 {
        match self.seed_policy {
            SeedPolicy::Pinned => self.seed,
            SeedPolicy::PerVersion => sub_seed(self.seed, version),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopModel {
    Single {
        fit: GlmmTreeFit,
    },
    /// The ensemble predicts; the single tree supplies the rules.
    Bagged {
        ensemble: BaggedGlmmTree,
        interpretable: GlmmTreeFit,
    },
}

impl LoopModel {
    pub fn predictor(&self) -> &dyn MixedPredictor {
        match self {
            LoopModel::Single { fit } => fit,
            LoopModel::Bagged { ensemble, .. } => ensemble,
        }
    }

    pub fn interpretable(&self) -> &GlmmTreeFit {
        match self {
            LoopModel::Single { fit } => fit,
            LoopModel::Bagged { interpretable, .. } => interpretable,
        }
    }

    pub fn variances(&self) -> Variances {
        let (sigma2, sigma_b2, b_hat) = match self {
            LoopModel::Single { fit } => (fit.sigma2, fit.sigma_b2, fit.b_hat.clone()),
            LoopModel::Bagged { ensemble, .. } => ensemble.variances(),
        };
        Variances {
            sigma2,
            sigma_b2,
            b_hat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub sigma2: f64,
    pub sigma_b2: f64,
    pub b_hat: BTreeMap<String, f64>,
}

/// Summed absolute disagreement between the model and target-correction
/// advice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviceLoss {
    pub total: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: u64,
    pub seed: u64,
    pub train: EvalMetrics,
    pub test: EvalMetrics,
    pub advice_loss: Option<AdviceLoss>,
    pub n_fit_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub at_version: u64,
    pub reason: String,
    pub n_records: usize,
    pub report: Option<GateReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub version: u64,
    pub config: LoopConfig,
    pub model: LoopModel,
    pub rules: RuleSet,
    /// Rule set whose membership columns the current model reads.
    pub feature_rules: Option<RuleSet>,
    pub log: Vec<AcceptedBatch>,
    pub history: Vec<VersionRecord>,
    pub rejections: Vec<Rejection>,
}

fn fit_model(d: &Dataset, config: &LoopConfig, seed: u64) -> Result<LoopModel> {
    let d = d.labelled();
    let partitioners = match &config.partitioners {
        Some(p) => p.clone(),
        None => default_partitioners(d.schema(), &config.regressors),
    };
    let single = fit_glmm_tree(&d, &config.regressors, &partitioners, &config.tree)?;
    Ok(match config.model {
        ModelKind::Single => LoopModel::Single { fit: single },
        ModelKind::Bagged => {
            let params = BaggedParams {
                n_trees: config.bagged_trees,
                bootstrap: true,
                seed,
                tree: config.tree.clone(),
            };
            LoopModel::Bagged {
                ensemble: fit_bagged_glmm_tree(&d, &config.regressors, &partitioners, &params)?,
                interpretable: single,
            }
        }
    })
}

impl LoopState {
    /// Fits version 0 on the observed training data.
    pub fn initialize(train: &Dataset, test: &Dataset, config: LoopConfig) -> Result<Self> {
        let seed = config.seed_for(0);
        let model = fit_model(train, &config, seed)?;
        let mut state = LoopState {
            version: 0,
            rules: extract_rules(model.interpretable()),
            model,
            feature_rules: None,
            log: Vec::new(),
            history: Vec::new(),
            rejections: Vec::new(),
            config,
        };
        let rec = state.record(train, test, seed, train.labelled().n_records())?;
        state.history.push(rec);
        Ok(state)
    }

    /// Adds any rule-membership columns the current model expects.
    pub fn prepare(&self, d: &Dataset) -> Result<Dataset> {
        match &self.feature_rules {
            Some(rs) => append_rule_features(d, rs),
            None => Ok(d.clone()),
        }
    }

    pub fn predict(&self, d: &Dataset, mode: PredictMode) -> Result<Vec<f64>> {
        Ok(self.model.predictor().predict_dataset(&self.prepare(d)?, mode)?)
    }

    fn metrics(&self, d: &Dataset, split: &str) -> Result<EvalMetrics> {
        let d = d.labelled();
        let pred = self.predict(&d, PredictMode::Conditional)?;
        evaluate(&pred, &d.targets(), split)
    }

    fn advice_loss(&self, train: &Dataset, records: &[AdviceRecord]) -> Result<Option<AdviceLoss>> {
        let rows: Vec<VisitRecord> = records
            .iter()
            .filter(|r| r.advice_kind == AdviceKind::TargetCorrection)
            .map(|r| VisitRecord {
                patient_id: r.patient_id.clone(),
                care_date: r.care_date,
                features: shown_row(train, r),
                target: r.advice,
                weight: 1.0,
                origin: Origin::Advice,
            })
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let d = Dataset::new(train.schema().to_vec(), train.target_name(), rows)?;
        let pred = self.predict(&d, PredictMode::Conditional)?;
        let total = pred.iter().zip(d.targets()).map(|(p, a)| (p - a).abs()).sum();
        Ok(Some(AdviceLoss { total, n: d.n_records() }))
    }

    fn record(&self, train: &Dataset, test: &Dataset, seed: u64, n_fit_rows: usize) -> Result<VersionRecord> {
        let records: Vec<AdviceRecord> = self.log.iter().flat_map(|b| b.records.iter().cloned()).collect();
        Ok(VersionRecord {
            version: self.version,
            seed,
            train: self.metrics(train, "train")?,
            test: self.metrics(test, "test")?,
            advice_loss: self.advice_loss(train, &records)?,
            n_fit_rows,
        })
    }

    /// Every accepted advice record so far.
    pub fn accepted_records(&self) -> Vec<AdviceRecord> {
        self.log.iter().flat_map(|b| b.records.iter().cloned()).collect()
    }

    /// Gates `batch`, merges all accepted advice into `train`, refits and
    /// evaluates. A failed gate returns the state with only a rejection
    /// appended. Errors leave nothing changed.
    pub fn iterate(&self, batch: &AdviceBatch, train: &Dataset, test: &Dataset) -> Result<(LoopState, IterationStatus)> {
        batch.validate()?;
        let next = self.version + 1;
        if let Some(max) = self.config.max_versions {
            if next > max {
                return Err(LoopError::InvalidAdvice(format!("version limit {max} reached")));
            }
        }
        let seed = self.config.seed_for(next);
        let gate = gate_batch(&batch.records, &self.config.gate, seed)?;
        if !gate.pass {
            let mut out = self.clone();
            out.rejections.push(Rejection {
                at_version: self.version,
                reason: gate.reason.clone().unwrap_or_default(),
                n_records: batch.records.len(),
                report: Some(gate),
            });
            return Ok((out, IterationStatus::Rejected));
        }
        let mut working = self.rules.clone();
        let mut resolved = Vec::with_capacity(batch.edits.len());
        for staged in &batch.edits {
            let outcome = apply_edit(&working, &staged.edit, train.schema())?;
            working = outcome.rules;
            let rule = working
                .get(staged.edit.rule_id)
                .cloned()
                .ok_or(RuleError::UnknownRule(staged.edit.rule_id))?;
            resolved.push(ResolvedEdit {
                id: staged.id,
                edit: staged.edit.clone(),
                rule,
            });
        }
        let mut log = self.log.clone();
        log.push(AcceptedBatch {
            version: next,
            records: batch.records.clone(),
            edits: resolved,
        });
        let records: Vec<AdviceRecord> = log.iter().flat_map(|b| b.records.iter().cloned()).collect();
        let edits: Vec<ResolvedEdit> = log.iter().flat_map(|b| b.edits.iter().cloned()).collect();
        let noise_sd = self.model.variances().sigma2.sqrt();
        let merged = merge_advice(
            train,
            &records,
            &edits,
            &self.config.regressors,
            &self.config.merge,
            noise_sd,
            seed,
        )?;
        let feature_rules = self.config.merge.rule_features.then(|| self.rules.clone());
        let merged = match &feature_rules {
            Some(rs) => append_rule_features(&merged, rs)?,
            None => merged,
        };
        let model = fit_model(&merged, &self.config, seed)?;
        let mut rules = extract_rules(model.interpretable());
        rules.version = next;
        let mut out = LoopState {
            version: next,
            config: self.config.clone(),
            model,
            rules,
            feature_rules,
            log,
            history: self.history.clone(),
            rejections: self.rejections.clone(),
        };
        let rec = out.record(train, test, seed, merged.labelled().n_records())?;
        out.history.push(rec);
        Ok((out, IterationStatus::Accepted))
    }

    pub fn variances(&self) -> Variances {
        self.model.variances()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariancesFile {
    model_version: u64,
    #[serde(flatten)]
    variances: Variances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    model_version: u64,
    model: LoopModel,
    feature_rules: Option<RuleSet>,
    rejections: Vec<Rejection>,
}

pub const SNAPSHOT_FILES: [&str; 6] = [
    "rules.json",
    "variances.json",
    "metrics.json",
    "pool.json",
    "config.json",
    "model.json",
];

pub fn snapshot_dir(root: &Path, version: u64) -> PathBuf {
    root.join(format!("v{version:04}"))
}

/// Writes the state under `root/v{version}`.
pub fn write_snapshot(state: &LoopState, root: &Path) -> Result<PathBuf> {
    let dir = snapshot_dir(root, state.version);
    fs::create_dir_all(&dir)?;
    let put = |name: &str, body: String| fs::write(dir.join(name), body + "\n");
    put("rules.json", state.rules.to_json())?;
    put(
        "variances.json",
        serde_json::to_string_pretty(&VariancesFile {
            model_version: state.version,
            variances: state.variances(),
        })?,
    )?;
    put("metrics.json", serde_json::to_string_pretty(&state.history)?)?;
    put("pool.json", serde_json::to_string_pretty(&state.log)?)?;
    put("config.json", serde_json::to_string_pretty(&state.config)?)?;
    put(
        "model.json",
        serde_json::to_string(&ModelFile {
            model_version: state.version,
            model: state.model.clone(),
            feature_rules: state.feature_rules.clone(),
            rejections: state.rejections.clone(),
        })?,
    )?;
    Ok(dir)
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let body = fs::read_to_string(dir.join(name))
        .map_err(|e| LoopError::Snapshot(format!("{}: {e}", dir.join(name).display())))?;
    Ok(serde_json::from_str(&body)?)
}

/// Reads the state stored under `root/v{version}`.
pub fn load_snapshot(root: &Path, version: u64) -> Result<LoopState> {
    let dir = snapshot_dir(root, version);
    let model: ModelFile = read_json(&dir, "model.json")?;
    if model.model_version != version {
        return Err(LoopError::Snapshot(format!(
            "{} holds version {}",
            dir.display(),
            model.model_version
        )));
    }
    Ok(LoopState {
        version,
        config: read_json(&dir, "config.json")?,
        model: model.model,
        rules: read_json(&dir, "rules.json")?,
        feature_rules: model.feature_rules,
        log: read_json(&dir, "pool.json")?,
        history: read_json(&dir, "metrics.json")?,
        rejections: model.rejections,
    })
}

/// Versions with a stored snapshot, ascending.
pub fn list_snapshots(root: &Path) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(v) = name.strip_prefix('v').and_then(|s| s.parse::<u64>().ok()) {
            out.push(v);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Simulated rater who knows the planted truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleExpert {
    pub truth: SyntheticTruth,
    pub noise_sd: f64,
    pub n_raters: usize,
    /// Fraction of the way each proposed edit moves a threshold toward
    /// the planted one; `None` proposes no edits.
    pub rho: Option<f64>,
    pub seed: u64,
}

impl OracleExpert {
    /// Noise-free advice: the planted expected ΔHb at the row.
    pub fn expected_at(&self, value: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        let point = self
            .truth
            .covariates
            .iter()
            .map(|c| value(&c.name))
            .collect::<Option<Vec<f64>>>()?;
        self.truth.expected(&point).ok()
    }

    fn record(&self, r: &VisitRecord, schema: &[String], y_hat: f64, rule_id: Option<u32>, advice: f64, rater: usize, version: u64) -> AdviceRecord {
        AdviceRecord {
            patient_id: r.patient_id.clone(),
            care_date: r.care_date,
            x_snapshot: schema
                .iter()
                .zip(&r.features)
                .filter_map(|(n, v)| v.map(|v| (n.clone(), v)))
                .collect(),
            y_hat,
            rule_id,
            advice: Some(advice),
            advice_kind: AdviceKind::TargetCorrection,
            edit_id: None,
            rater_id: format!("oracle-{rater}"),
            timestamp: r.care_date.and_hms_opt(12, 0, 0).expect("valid time").and_utc(),
            model_version: version,
        }
    }

    /// Reviews `k` unreviewed observed training visits: the half where the
    /// model's population prediction disagrees most with the truth plus a
    /// random half of the others. Optionally proposes an edit to the rule
    /// covering most reviewed visits.
    pub fn review(
        &self,
        state: &LoopState,
        train: &Dataset,
        reviewed: &mut BTreeSet<(String, NaiveDate)>,
        k: usize,
    ) -> Result<AdviceBatch> {
        let observed = train.filter(|r| r.origin == Origin::Observed);
        let prepared = state.prepare(&observed)?;
        let y_hat = state.model.predictor().predict_dataset(&prepared, PredictMode::Marginal)?;
        let schema = observed.schema().to_vec();
        let mut gaps: Vec<(f64, usize, f64)> = Vec::new();
        for (i, r) in observed.records().iter().enumerate() {
            if reviewed.contains(&(r.patient_id.clone(), r.care_date)) {
                continue;
            }
            let value = |f: &str| schema.iter().position(|n| n == f).and_then(|j| r.features[j]);
            if let Some(t) = self.expected_at(&value) {
                gaps.push(((t - y_hat[i]).abs(), i, t));
            }
        }
        gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, state.version));
        // Half the batch is calibration visits drawn from the rest, so the
        // raters see the full range of responses.
        let n_top = k.div_ceil(2).min(gaps.len());
        let rest = gaps.split_off(n_top);
        let n_cal = (k - n_top).min(rest.len());
        let mut picks = rand::seq::index::sample(&mut rng, rest.len(), n_cal).into_vec();
        picks.sort_unstable();
        gaps.extend(picks.into_iter().map(|p| rest[p]));
        let noise = Normal::new(0.0, self.noise_sd.max(0.0)).map_err(|e| LoopError::InvalidAdvice(e.to_string()))?;
        let mut batch = AdviceBatch::default();
        let mut rule_hits: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, i, t) in &gaps {
            let r = &observed.records()[i];
            let value = |f: &str| {
                prepared
                    .schema()
                    .iter()
                    .position(|n| n == f)
                    .and_then(|j| prepared.records()[i].features[j])
            };
            let rule_id = state.rules.locate(value).map(|k| state.rules.rules[k].id);
            if let Some(id) = rule_id {
                *rule_hits.entry(id).or_default() += 1;
            }
            for rater in 0..self.n_raters.max(1) {
                let a = t + noise.sample(&mut rng);
                batch.records.push(self.record(r, &schema, y_hat[i], rule_id, a, rater, state.version));
            }
            reviewed.insert((r.patient_id.clone(), r.care_date));
        }
        if let Some(rho) = self.rho {
            let top = rule_hits.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
            if let Some((&id, _)) = top {
                let rule = state.rules.get(id).expect("located rule exists");
                let when = batch.records.first().map(|r| r.timestamp).unwrap_or_default();
                if let Some(edit) = oracle_rule_edit(&self.truth, rule, rho, "oracle-0", when) {
                    batch.edits.push(StagedEdit { id: state.version * 1000 + 1, edit });
                }
            }
        }
        Ok(batch)
    }
}

/// Moves each condition of `rule` a fraction `rho` toward the nearest
/// planted threshold on the same feature and direction. `None` when no
/// condition has a planted counterpart.
pub fn oracle_rule_edit(
    truth: &SyntheticTruth,
    rule: &Rule,
    rho: f64,
    author: &str,
    timestamp: DateTime<Utc>,
) -> Option<RuleEdit> {
    let planted: Vec<&Condition> = truth.planted_conditions().collect();
    let operations: Vec<EditOp> = rule
        .conditions
        .iter()
        .filter_map(|c| {
            let target = planted
                .iter()
                .filter(|p| p.feature == c.feature && p.op == c.op)
                .min_by(|a, b| (a.threshold - c.threshold).abs().total_cmp(&(b.threshold - c.threshold).abs()))?;
            let threshold = c.threshold + rho * (target.threshold - c.threshold);
            (threshold != c.threshold).then(|| EditOp::ModifyThreshold {
                feature: c.feature.clone(),
                op: Some(c.op),
                threshold,
            })
        })
        .collect();
    if operations.is_empty() {
        return None;
    }
    Some(RuleEdit {
        rule_id: rule.id,
        operations,
        author: author.to_string(),
        timestamp,
    })
}

/// Runs `iterations` oracle rounds of `batch_size` visits from `state`,
/// writing every version under `snapshots` when given.
pub fn run_oracle_loop(
    state: LoopState,
    expert: &OracleExpert,
    train: &Dataset,
    test: &Dataset,
    iterations: usize,
    batch_size: usize,
    snapshots: Option<&Path>,
) -> Result<LoopState> {
    let mut reviewed: BTreeSet<(String, NaiveDate)> = state
        .accepted_records()
        .iter()
        .map(|r| (r.patient_id.clone(), r.care_date))
        .collect();
    if let Some(root) = snapshots {
        write_snapshot(&state, root)?;
    }
    let mut state = state;
    for _ in 0..iterations {
        let batch = expert.review(&state, train, &mut reviewed, batch_size)?;
        let (next, status) = state.iterate(&batch, train, test)?;
        if status == IterationStatus::Rejected {
            let reason = next.rejections.last().map(|r| r.reason.clone()).unwrap_or_default();
            return Err(LoopError::GateFailed(reason));
        }
        state = next;
        if let Some(root) = snapshots {
            write_snapshot(&state, root)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_fixtures() {
        let m = evaluate(&[1.0, -1.0], &[0.0, 0.0], "t").unwrap();
        assert_eq!((m.mae, m.rmse), (1.0, 1.0));
        let m = evaluate(&[0.0, 2.0], &[0.0, 0.0], "t").unwrap();
        assert_eq!((m.mae, m.rmse), (1.0, 2f64.sqrt()));
        let m = evaluate(&[3.0], &[3.0], "t").unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
    }

    #[test]
    fn evaluate_errors() {
        assert!(matches!(evaluate(&[], &[], "t"), Err(LoopError::Empty)));
        assert!(matches!(
            evaluate(&[1.0], &[1.0, 2.0], "t"),
            Err(LoopError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn advice_kind_wire_names() {
        assert_eq!(serde_json::to_string(&AdviceKind::DoseSuggestion).unwrap(), "\"dose-suggestion\"");
        assert_eq!(serde_json::to_string(&AdviceKind::RuleEditRef).unwrap(), "\"rule-edit-ref\"");
    }

    #[test]
    fn seed_policy() {
        let mut c = LoopConfig { seed: 7, ..Default::default() };
        assert_ne!(c.seed_for(1), c.seed_for(2));
        c.seed_policy = SeedPolicy::Pinned;
        assert_eq!(c.seed_for(1), 7);
    }
}
