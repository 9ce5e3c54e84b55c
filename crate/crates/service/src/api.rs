//! JSON API under `/api/v1`. Every body carries the `model_version` it was
//! computed from; errors are `{"error", "detail"}`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use doseloop_core::dataset::{Dataset, HB_COLUMN};
use doseloop_core::feedback::{
    gate_batch, ratings_for, write_snapshot, AdviceBatch, AdviceKind, AdviceRecord,
    IterationStatus, LoopError, LoopState, StagedEdit,
};
use doseloop_core::glmmtree::{dose_response, DosePoint};
use doseloop_core::lmm::PredictMode;
use doseloop_core::rules::{apply_edit, sample_from_rule, RuleEdit, RuleSet, SampleSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: &'static str,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }

    fn invalid(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Io(_) | LoopError::Json(_) | LoopError::Snapshot(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            }
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<doseloop_core::glmmtree::GlmmTreeError> for ApiError {
    fn from(e: doseloop_core::glmmtree::GlmmTreeError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

type ApiResult = Result<Response, ApiError>;

/// Serializes `body` as an object and stamps it with the model version.
fn versioned(version: u64, body: impl Serialize) -> Value {
    let mut v = serde_json::to_value(body).expect("response types serialize");
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("model_version".into(), json!(version));
            v
        }
        None => json!({"model_version": version, "data": v}),
    }
}

fn ok(version: u64, body: impl Serialize) -> ApiResult {
    Ok(Json(versioned(version, body)).into_response())
}

fn created(version: u64, body: impl Serialize) -> ApiResult {
    Ok((StatusCode::CREATED, Json(versioned(version, body))).into_response())
}

pub struct Inner {
    pub state: LoopState,
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    /// Train and test visits together, for patient views.
    pub all: Arc<Dataset>,
    pub pending: AdviceBatch,
    pub next_edit_id: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    pub token: Option<String>,
    pub snapshots: Option<PathBuf>,
    pub dose_grid: Vec<f64>,
}

struct Shared {
    inner: RwLock<Inner>,
    iterating: Mutex<()>,
    options: ServerOptions,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(state: LoopState, train: Dataset, test: Dataset, options: ServerOptions) -> Result<Self, LoopError> {
        let all = train.with_records(test.records().to_vec())?;
        let next_edit_id = state
            .log
            .iter()
            .flat_map(|b| b.edits.iter().map(|e| e.id + 1))
            .max()
            .unwrap_or(1);
        Ok(Self(Arc::new(Shared {
            inner: RwLock::new(Inner {
                state,
                train: Arc::new(train),
                test: Arc::new(test),
                all: Arc::new(all),
                pending: AdviceBatch::default(),
                next_edit_id,
            }),
            iterating: Mutex::new(()),
            options,
        })))
    }

    /// Held while an iteration runs; `POST /loop/iterate` answers 409
    /// when it is taken.
    pub fn iterate_lock(&self) -> &Mutex<()> {
        &self.0.iterating
    }

    pub async fn version(&self) -> u64 {
        self.0.inner.read().await.state.version
    }

    pub async fn loop_state(&self) -> LoopState {
        self.0.inner.read().await.state.clone()
    }
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/v1/rules", get(get_rules))
        .route("/api/v1/rules/{id}", get(get_rule))
        .route("/api/v1/rules/{id}/edits", post(post_edit).get(get_edits))
        .route("/api/v1/rules/{id}/edits/validate", post(validate_edit))
        .route("/api/v1/patients", get(get_patients))
        .route("/api/v1/patients/{id}/trajectory", get(get_trajectory))
        .route("/api/v1/patients/{id}/dose-response", get(get_dose_response))
        .route("/api/v1/annotations", post(post_annotation).get(get_annotations))
        .route("/api/v1/agreement", get(get_agreement))
        .route("/api/v1/loop/iterate", post(post_iterate))
        .route("/api/v1/metrics", get(get_metrics))
        .route("/api/v1/versions", get(get_versions))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}

async fn auth(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.0.options.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

fn parse_rule_id(raw: &str) -> Result<u32, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::invalid(format!("rule id `{raw}` is not an integer")))
}

/// Value lookup over one record of `d`.
fn lookup<'a>(d: &'a Dataset, i: usize) -> impl Fn(&str) -> Option<f64> + 'a {
    move |f: &str| d.feature_index(f).ok().and_then(|j| d.records()[i].features[j])
}

/// Rule id of every record of the prepared dataset.
fn rule_ids(rules: &RuleSet, d: &Dataset) -> Vec<Option<u32>> {
    (0..d.n_records())
        .map(|i| rules.locate(lookup(d, i)).map(|k| rules.rules[k].id))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct PatientSummary {
    patient_id: String,
    /// Rule covering the latest visit.
    rule_id: Option<u32>,
    n_visits: usize,
    last_visit: NaiveDate,
}

fn patient_summaries(inner: &Inner) -> Result<Vec<PatientSummary>, ApiError> {
    let prepared = inner.state.prepare(&inner.all)?;
    let ids = rule_ids(&inner.state.rules, &prepared);
    let mut out: BTreeMap<&str, PatientSummary> = BTreeMap::new();
    for (r, id) in prepared.records().iter().zip(ids) {
        let e = out.entry(r.patient_id.as_str()).or_insert_with(|| PatientSummary {
            patient_id: r.patient_id.clone(),
            rule_id: id,
            n_visits: 0,
            last_visit: r.care_date,
        });
        e.n_visits += 1;
        if r.care_date >= e.last_visit {
            e.last_visit = r.care_date;
            e.rule_id = id;
        }
    }
    Ok(out.into_values().collect())
}

async fn get_rules(State(app): State<AppState>) -> ApiResult {
    let inner = app.0.inner.read().await;
    ok(inner.state.version, &inner.state.rules)
}

async fn get_rule(State(app): State<AppState>, Path(raw): Path<String>) -> ApiResult {
    let id = parse_rule_id(&raw)?;
    let inner = app.0.inner.read().await;
    let rules = &inner.state.rules;
    let rule = rules.get(id).ok_or_else(|| ApiError::not_found(format!("rule {id}")))?;
    let n_patients = patient_summaries(&inner)?.iter().filter(|p| p.rule_id == Some(id)).count();
    ok(
        inner.state.version,
        json!({
            "rule": rule,
            "text": rule.text(&rules.regressors),
            "regressors": rules.regressors,
            "n_patients": n_patients,
        }),
    )
}

#[derive(Debug, Serialize)]
struct EditCheck {
    rule: doseloop_core::rules::Rule,
    text: String,
    report: doseloop_core::rules::ValidationReport,
    /// Synthetic visits drawn from the edited rule.
    preview: Vec<doseloop_core::dataset::VisitRecord>,
}

/// Applies pending edits then `edit` to the active rules, and draws a
/// preview from the result. Fails exactly when the next iteration would.
fn check_edit(inner: &Inner, id: u32, edit: &RuleEdit, preview_seed: u64) -> Result<EditCheck, ApiError> {
    if edit.rule_id != id {
        return Err(ApiError::invalid(format!(
            "edit targets rule {} but was posted to rule {id}",
            edit.rule_id
        )));
    }
    let schema = inner.train.schema();
    let mut rules = inner.state.rules.clone();
    for staged in &inner.pending.edits {
        rules = apply_edit(&rules, &staged.edit, schema).map_err(|e| ApiError::invalid(e.to_string()))?.rules;
    }
    let outcome = apply_edit(&rules, edit, schema).map_err(|e| ApiError::invalid(e.to_string()))?;
    let rule = outcome.rules.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("rule {id}")))?;
    let ranges = inner.train.feature_ranges();
    let spec = SampleSpec {
        ranges: &ranges,
        regressors: &outcome.rules.regressors,
        n: 20,
        noise_sd: inner.state.variances().sigma2.sqrt(),
        weight: 1.0,
        care_date: inner.train.max_date().unwrap_or(NaiveDate::MIN),
        seed: preview_seed,
    };
    let preview = sample_from_rule(&rule, &spec).map_err(|e| ApiError::invalid(e.to_string()))?;
    Ok(EditCheck {
        text: rule.text(&outcome.rules.regressors),
        rule,
        report: outcome.report,
        preview,
    })
}

async fn post_edit(
    State(app): State<AppState>,
    Path(raw): Path<String>,
    body: Result<Json<RuleEdit>, JsonRejection>,
) -> ApiResult {
    let id = parse_rule_id(&raw)?;
    let Json(edit) = body?;
    let mut inner = app.0.inner.write().await;
    let edit_id = inner.next_edit_id;
    let check = check_edit(&inner, id, &edit, edit_id)?;
    inner.next_edit_id += 1;
    inner.pending.edits.push(StagedEdit { id: edit_id, edit: edit.clone() });
    created(inner.state.version, json!({"edit_id": edit_id, "edit": edit, "check": check}))
}

async fn validate_edit(
    State(app): State<AppState>,
    Path(raw): Path<String>,
    body: Result<Json<RuleEdit>, JsonRejection>,
) -> ApiResult {
    let id = parse_rule_id(&raw)?;
    let Json(edit) = body?;
    let inner = app.0.inner.read().await;
    let check = check_edit(&inner, id, &edit, inner.next_edit_id)?;
    ok(inner.state.version, check)
}

async fn get_edits(State(app): State<AppState>, Path(raw): Path<String>) -> ApiResult {
    let id = parse_rule_id(&raw)?;
    let inner = app.0.inner.read().await;
    let edits: Vec<&StagedEdit> = inner.pending.edits.iter().filter(|e| e.edit.rule_id == id).collect();
    ok(inner.state.version, json!({"rule_id": id, "edits": edits}))
}

#[derive(Debug, Deserialize)]
struct PatientQuery {
    rule: Option<String>,
}

async fn get_patients(State(app): State<AppState>, Query(q): Query<PatientQuery>) -> ApiResult {
    let inner = app.0.inner.read().await;
    let rule = q.rule.as_deref().map(parse_rule_id).transpose()?;
    if let Some(id) = rule {
        if inner.state.rules.get(id).is_none() {
            return Err(ApiError::not_found(format!("rule {id}")));
        }
    }
    let patients: Vec<PatientSummary> = patient_summaries(&inner)?
        .into_iter()
        .filter(|p| rule.is_none() || p.rule_id == rule)
        .collect();
    ok(inner.state.version, json!({"rule_id": rule, "patients": patients}))
}

#[derive(Debug, Serialize)]
struct TrajectoryPoint {
    care_date: NaiveDate,
    features: BTreeMap<String, Option<f64>>,
    target: Option<f64>,
    y_hat: f64,
    rule_id: Option<u32>,
    split: &'static str,
}

/// Indices of a patient's visits in `all`, oldest first.
fn patient_rows(inner: &Inner, pid: &str) -> Result<Vec<usize>, ApiError> {
    let rows: Vec<usize> = inner
        .all
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.patient_id == pid)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(ApiError::not_found(format!("patient {pid}")));
    }
    Ok(rows)
}

async fn get_trajectory(State(app): State<AppState>, Path(pid): Path<String>) -> ApiResult {
    let inner = app.0.inner.read().await;
    let rows = patient_rows(&inner, &pid)?;
    let subset = inner.all.filter(|r| r.patient_id == pid);
    let prepared = inner.state.prepare(&subset)?;
    let y_hat = inner.state.model.predictor().predict_dataset(&prepared, PredictMode::Conditional)?;
    let ids = rule_ids(&inner.state.rules, &prepared);
    let visits: Vec<TrajectoryPoint> = rows
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let r = &inner.all.records()[i];
            TrajectoryPoint {
                care_date: r.care_date,
                features: inner.all.schema().iter().cloned().zip(r.features.iter().copied()).collect(),
                target: r.target,
                y_hat: y_hat[k],
                rule_id: ids[k],
                split: if inner.test.find(&pid, r.care_date).is_some() { "test" } else { "train" },
            }
        })
        .collect();
    ok(inner.state.version, json!({"patient_id": pid, "visits": visits}))
}

#[derive(Debug, Deserialize)]
struct GridQuery {
    grid: Option<String>,
}

fn parse_grid(raw: Option<&str>, default: &[f64]) -> Result<Vec<f64>, ApiError> {
    match raw {
        None | Some("") => Ok(default.to_vec()),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ApiError::invalid(format!("bad grid value `{t}`")))
            })
            .collect(),
    }
}

#[derive(Debug, Serialize)]
struct DoseResponseBody {
    patient_id: String,
    care_date: NaiveDate,
    current_hb: f64,
    points: Vec<DosePoint>,
}

/// Dose-response at the patient's latest visit, as served by the API.
pub fn patient_dose_response(inner: &Inner, pid: &str, grid: &[f64]) -> Result<(NaiveDate, f64, Vec<DosePoint>), ApiError> {
    patient_rows(inner, pid)?;
    let subset = inner.all.filter(|r| r.patient_id == pid);
    let prepared = inner.state.prepare(&subset)?;
    let last = prepared.n_records() - 1;
    let value = lookup(&prepared, last);
    let current_hb = value(HB_COLUMN)
        .ok_or_else(|| ApiError::invalid(format!("latest visit of {pid} has no {HB_COLUMN} value")))?;
    let points = dose_response(
        inner.state.model.predictor(),
        &value,
        Some(pid),
        &inner.state.config.merge.dose_feature,
        current_hb,
        grid,
    )
    .map_err(|e| ApiError::invalid(e.to_string()))?;
    Ok((prepared.records()[last].care_date, current_hb, points))
}

async fn get_dose_response(
    State(app): State<AppState>,
    Path(pid): Path<String>,
    Query(q): Query<GridQuery>,
) -> ApiResult {
    let grid = parse_grid(q.grid.as_deref(), &app.0.options.dose_grid)?;
    let inner = app.0.inner.read().await;
    let (care_date, current_hb, points) = patient_dose_response(&inner, &pid, &grid)?;
    ok(
        inner.state.version,
        DoseResponseBody {
            patient_id: pid,
            care_date,
            current_hb,
            points,
        },
    )
}

async fn post_annotation(State(app): State<AppState>, body: Result<Json<AdviceRecord>, JsonRejection>) -> ApiResult {
    let Json(mut record) = body?;
    let mut inner = app.0.inner.write().await;
    record.model_version = inner.state.version;
    let ids = inner.pending.edits.iter().map(|e| e.id).collect();
    record.validate(&ids)?;
    let mut trial = inner.pending.records.clone();
    trial.push(record.clone());
    // Duplicate (visit, rater, kind) pairs would make agreement undefined.
    if let Err(e @ doseloop_core::agreement::AgreementError::DuplicateRating { .. }) =
        ratings_for(&trial, record.advice_kind)
    {
        return Err(ApiError::new(StatusCode::CONFLICT, "duplicate_rating", e.to_string()));
    }
    inner.pending.records.push(record.clone());
    let index = inner.pending.records.len() - 1;
    created(inner.state.version, json!({"index": index, "record": record}))
}

#[derive(Debug, Deserialize)]
struct AnnotationQuery {
    version: Option<String>,
    rater: Option<String>,
}

async fn get_annotations(State(app): State<AppState>, Query(q): Query<AnnotationQuery>) -> ApiResult {
    let inner = app.0.inner.read().await;
    let version = match q.version.as_deref() {
        None => None,
        Some("current") => Some(inner.state.version),
        Some(v) => Some(v.parse::<u64>().map_err(|_| ApiError::invalid(format!("bad version `{v}`")))?),
    };
    let records: Vec<&AdviceRecord> = inner
        .state
        .log
        .iter()
        .flat_map(|b| b.records.iter())
        .chain(inner.pending.records.iter())
        .filter(|r| version.is_none_or(|v| r.model_version == v))
        .filter(|r| q.rater.as_deref().is_none_or(|id| r.rater_id == id))
        .collect();
    ok(inner.state.version, json!({"records": records, "pending": inner.pending.records.len()}))
}

async fn get_agreement(State(app): State<AppState>) -> ApiResult {
    let inner = app.0.inner.read().await;
    let records = &inner.pending.records;
    let config = &inner.state.config;
    let report = gate_batch(records, &config.gate, config.seed_for(inner.state.version + 1))?;
    let kinds: std::collections::BTreeSet<AdviceKind> = records
        .iter()
        .map(|r| r.advice_kind)
        .filter(|k| *k != AdviceKind::RuleEditRef)
        .collect();
    let ratings: BTreeMap<AdviceKind, _> = kinds
        .into_iter()
        .filter_map(|k| ratings_for(records, k).ok().map(|m| (k, m)))
        .collect();
    ok(
        inner.state.version,
        json!({"n_records": records.len(), "report": report, "ratings": ratings}),
    )
}

async fn post_iterate(State(app): State<AppState>) -> ApiResult {
    let Ok(_guard) = app.0.iterating.try_lock() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "busy", "an iteration is already running"));
    };
    let (state, batch, train, test) = {
        let inner = app.0.inner.read().await;
        (inner.state.clone(), inner.pending.clone(), inner.train.clone(), inner.test.clone())
    };
    let previous = state.version;
    let run_batch = batch.clone();
    let (next, status) = tokio::task::spawn_blocking(move || state.iterate(&run_batch, &train, &test))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    if status == IterationStatus::Accepted {
        if let Some(root) = &app.0.options.snapshots {
            write_snapshot(&next, root)?;
        }
    }
    let mut inner = app.0.inner.write().await;
    if status == IterationStatus::Accepted {
        inner.pending.records.drain(..batch.records.len());
        inner.pending.edits.drain(..batch.edits.len());
    }
    inner.state = next;
    let body = json!({
        "status": status,
        "previous_version": previous,
        "metrics": inner.state.history.last(),
        "rejection": (status == IterationStatus::Rejected).then(|| inner.state.rejections.last()).flatten(),
    });
    ok(inner.state.version, body)
}

async fn get_metrics(State(app): State<AppState>) -> ApiResult {
    let inner = app.0.inner.read().await;
    ok(inner.state.version, json!({"history": inner.state.history}))
}

async fn get_versions(State(app): State<AppState>) -> ApiResult {
    let inner = app.0.inner.read().await;
    let s = &inner.state;
    let versions: Vec<Value> = s
        .history
        .iter()
        .map(|h| {
            let batch = s.log.iter().find(|b| b.version == h.version);
            json!({
                "version": h.version,
                "seed": h.seed,
                "n_fit_rows": h.n_fit_rows,
                "n_advice": batch.map_or(0, |b| b.records.len()),
                "n_edits": batch.map_or(0, |b| b.edits.len()),
                "test_mae": h.test.mae,
            })
        })
        .collect();
    ok(s.version, json!({"versions": versions, "rejections": s.rejections}))
}
