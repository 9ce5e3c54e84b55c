//! Longitudinal visit-level data: CSV ingestion, lagged feature derivation,
//! temporal train/test splits and a planted-truth synthetic generator.
//!
//! Every record belongs to a patient (the clustering unit for random
//! intercepts) and a care date. Feature values are stored aligned with the
//! dataset schema; `None` is the explicit missing marker and is never
//! replaced by zero, because zero is a meaningful dose.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{Condition, RuleSet};

/// Reserved column holding the patient identifier.
pub const ID_COLUMN: &str = "ID";
/// Reserved column holding the ISO 8601 visit date.
pub const DATE_COLUMN: &str = "Care_Date";
/// Optional column holding per-row weights.
pub const WEIGHT_COLUMN: &str = "weight";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate visit ({patient_id}, {care_date}) at rows {first_row} and {second_row}")]
    DuplicateVisit {
        patient_id: String,
        care_date: NaiveDate,
        first_row: usize,
        second_row: usize,
    },
    #[error("row {row}: malformed numeric value {value:?} in column `{column}`")]
    MalformedNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: malformed date {value:?}")]
    MalformedDate { row: usize, value: String },
    #[error("row {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature name `{0}` already exists")]
    NameCollision(String),
    #[error("invalid lag derivation: {0}")]
    InvalidLag(String),
    #[error("invalid synthetic truth: {0}")]
    InvalidTruth(String),
    #[error("planted rules are not a partition: a point matched {matches} rules")]
    NotAPartition { matches: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Where a record came from. Observed rows are unique per (patient, date);
/// rows added by advice merging or rule sampling may share those keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Observed,
    Advice,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub care_date: NaiveDate,
    /// Values aligned with the owning dataset's schema.
    pub features: Vec<Option<f64>>,
    pub target: Option<f64>,
    pub weight: f64,
    pub origin: Origin,
}

impl VisitRecord {
    pub fn observed(
        patient_id: impl Into<String>,
        care_date: NaiveDate,
        features: Vec<Option<f64>>,
        target: Option<f64>,
    ) -> Self {
        Self {
            patient_id: patient_id.into(),
            care_date,
            features,
            target,
            weight: 1.0,
            origin: Origin::Observed,
        }
    }
}

/// An immutable, validated collection of visits.
///
/// Invariants: records sorted by patient then date (then origin, stable),
/// observed (patient, date) pairs unique, every record has one value slot
/// per schema feature, targets finite when present, weights non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Vec<String>,
    target_name: String,
    records: Vec<VisitRecord>,
}

impl Dataset {
    pub fn new(
        schema: Vec<String>,
        target_name: impl Into<String>,
        mut records: Vec<VisitRecord>,
    ) -> Result<Self> {
        let target_name = target_name.into();
        let mut seen = std::collections::HashSet::new();
        for name in &schema {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::NameCollision(name.clone()));
            }
        }
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != schema.len() {
                return Err(DatasetError::InvalidRecord {
                    row: i + 1,
                    reason: format!(
                        "{} feature values for a schema of {}",
                        r.features.len(),
                        schema.len()
                    ),
                });
            }
            if let Some(t) = r.target {
                if !t.is_finite() {
                    return Err(DatasetError::InvalidRecord {
                        row: i + 1,
                        reason: "non-finite target".into(),
                    });
                }
            }
            if !(r.weight >= 0.0) || !r.weight.is_finite() {
                return Err(DatasetError::InvalidRecord {
                    row: i + 1,
                    reason: format!("invalid weight {}", r.weight),
                });
            }
            if r.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DatasetError::InvalidRecord {
                    row: i + 1,
                    reason: "non-finite feature value".into(),
                });
            }
        }
        // Remember input positions so duplicate errors can name both rows.
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            (&ra.patient_id, ra.care_date, ra.origin)
                .cmp(&(&rb.patient_id, rb.care_date, rb.origin))
                .then(a.cmp(&b))
        });
        for pair in order.windows(2) {
            let (a, b) = (&records[pair[0]], &records[pair[1]]);
            if a.origin == Origin::Observed
                && b.origin == Origin::Observed
                && a.patient_id == b.patient_id
                && a.care_date == b.care_date
            {
                return Err(DatasetError::DuplicateVisit {
                    patient_id: a.patient_id.clone(),
                    care_date: a.care_date,
                    first_row: pair[0].min(pair[1]) + 1,
                    second_row: pair[0].max(pair[1]) + 1,
                });
            }
        }
        let mut slots: Vec<Option<VisitRecord>> = records.drain(..).map(Some).collect();
        let records = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        Ok(Self {
            schema,
            target_name,
            records,
        })
    }

    pub fn empty(schema: Vec<String>, target_name: impl Into<String>) -> Self {
        Self {
            schema,
            target_name: target_name.into(),
            records: Vec::new(),
        }
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn records(&self) -> &[VisitRecord] {
        &self.records
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn n_patients(&self) -> usize {
        let mut n = 0;
        let mut last: Option<&str> = None;
        for r in &self.records {
            if last != Some(r.patient_id.as_str()) {
                n += 1;
                last = Some(&r.patient_id);
            }
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.schema
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| DatasetError::UnknownFeature(name.to_string()))
    }

    pub fn value(&self, row: usize, name: &str) -> Result<Option<f64>> {
        let j = self.feature_index(name)?;
        Ok(self.records[row].features[j])
    }

    /// Dense `rows × names` matrix with `NaN` standing in for missing values.
    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|n| self.feature_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.records.len(), cols.len(), |i, j| {
            self.records[i].features[cols[j]].unwrap_or(f64::NAN)
        }))
    }

    /// Targets with `NaN` for missing.
    pub fn targets(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.target.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.weight).collect()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    /// Rows usable for fitting: target present and weight positive.
    pub fn labelled(&self) -> Dataset {
        self.filter(|r| r.target.is_some() && r.weight > 0.0)
    }

    pub fn filter(&self, keep: impl Fn(&VisitRecord) -> bool) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            target_name: self.target_name.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Records for one patient, in date order.
    pub fn patient_records<'a>(&'a self, patient_id: &'a str) -> impl Iterator<Item = &'a VisitRecord> + 'a {
        self.records.iter().filter(move |r| r.patient_id == patient_id)
    }

    pub fn find(&self, patient_id: &str, care_date: NaiveDate) -> Option<&VisitRecord> {
        self.records.iter().find(|r| {
            r.origin == Origin::Observed && r.patient_id == patient_id && r.care_date == care_date
        })
    }

    /// Appends records (validated and re-sorted). Existing records keep
    /// their relative order and contents.
    pub fn with_records(&self, extra: Vec<VisitRecord>) -> Result<Dataset> {
        let mut all = self.records.clone();
        all.extend(extra);
        Dataset::new(self.schema.clone(), self.target_name.clone(), all)
    }

    /// Appends a new numeric column.
    pub fn with_column(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        if self.schema.iter().any(|s| s == name) {
            return Err(DatasetError::NameCollision(name.to_string()));
        }
        assert_eq!(values.len(), self.records.len(), "column length mismatch");
        let mut schema = self.schema.clone();
        schema.push(name.to_string());
        let records = self
            .records
            .iter()
            .zip(values)
            .map(|(r, v)| {
                let mut r = r.clone();
                r.features.push(v);
                r
            })
            .collect();
        Ok(Dataset {
            schema,
            target_name: self.target_name.clone(),
            records,
        })
    }

    pub fn min_date(&self) -> Option<NaiveDate> {
        self.records.iter().map(|r| r.care_date).min()
    }

    pub fn max_date(&self) -> Option<NaiveDate> {
        self.records.iter().map(|r| r.care_date).max()
    }

    /// Observed `[min, max]` range of each schema feature (missing ignored;
    /// all-missing columns get `[0, 0]`).
    pub fn feature_ranges(&self) -> Vec<FeatureRange> {
        self.schema
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mut low = f64::INFINITY;
                let mut high = f64::NEG_INFINITY;
                for v in self.records.iter().filter_map(|r| r.features[j]) {
                    low = low.min(v);
                    high = high.max(v);
                }
                if low > high {
                    low = 0.0;
                    high = 0.0;
                }
                FeatureRange {
                    name: name.clone(),
                    low,
                    high,
                }
            })
            .collect()
    }
}

/// Closed numeric interval for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

impl FeatureRange {
    pub fn new(name: impl Into<String>, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
        }
    }
}

fn parse_cell(row: usize, column: &str, cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(DatasetError::MalformedNumeric {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Reads a long-format CSV (one row per visit).
///
/// Rows are numbered from 1 for the first data line. Extra columns are
/// ignored; a `weight` column is honoured when present.
pub fn load_csv(path: impl AsRef<Path>, schema: &[String], target_name: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema, target_name)
}

pub fn read_csv(reader: impl Read, schema: &[String], target_name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = col(ID_COLUMN)?;
    let date_col = col(DATE_COLUMN)?;
    let target_col = col(target_name)?;
    let feature_cols = schema.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let weight_col = col(WEIGHT_COLUMN).ok();

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let get = |c: usize| row.get(c).unwrap_or("");
        let date_str = get(date_col).trim();
        let care_date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
            DatasetError::MalformedDate {
                row: row_no,
                value: date_str.to_string(),
            }
        })?;
        let features = feature_cols
            .iter()
            .zip(schema)
            .map(|(&c, name)| parse_cell(row_no, name, get(c)))
            .collect::<Result<Vec<_>>>()?;
        let target = parse_cell(row_no, target_name, get(target_col))?;
        let weight = match weight_col {
            Some(c) => parse_cell(row_no, WEIGHT_COLUMN, get(c))?.unwrap_or(1.0),
            None => 1.0,
        };
        if weight < 0.0 {
            return Err(DatasetError::InvalidRecord {
                row: row_no,
                reason: format!("negative weight {weight}"),
            });
        }
        records.push(VisitRecord {
            patient_id: get(id_col).trim().to_string(),
            care_date,
            features,
            target,
            weight,
            origin: Origin::Observed,
        });
    }
    Dataset::new(schema.to_vec(), target_name, records)
}

/// Feature columns of a long-format CSV: every header other than the id,
/// date, target and weight columns, in file order.
pub fn header_schema(reader: impl Read, target_name: &str) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?;
    for required in [ID_COLUMN, DATE_COLUMN, target_name] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(DatasetError::MissingColumn(required.to_string()));
        }
    }
    Ok(headers
        .iter()
        .map(str::trim)
        .filter(|h| ![ID_COLUMN, DATE_COLUMN, WEIGHT_COLUMN, target_name].contains(h))
        .map(str::to_string)
        .collect())
}

/// Loads a CSV using [`header_schema`] for the features.
pub fn load_csv_auto(path: impl AsRef<Path>, target_name: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let schema = header_schema(file, target_name)?;
    load_csv(path, &schema, target_name)
}

/// Writes the dataset in the same long format `load_csv` reads.
pub fn write_csv(d: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![ID_COLUMN.to_string(), DATE_COLUMN.to_string()];
    header.extend(d.schema.iter().cloned());
    header.push(d.target_name.clone());
    let weighted = d.records.iter().any(|r| r.weight != 1.0);
    if weighted {
        header.push(WEIGHT_COLUMN.to_string());
    }
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &d.records {
        let mut row = vec![r.patient_id.clone(), r.care_date.format("%Y-%m-%d").to_string()];
        row.extend(r.features.iter().map(|&v| fmt(v)));
        row.push(fmt(r.target));
        if weighted {
            row.push(r.weight.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagKind {
    /// `value[t-k]`
    Lag,
    /// Change observed `k` visits before: `value[t-k] - value[t-k-1]`.
    Delta,
    /// Sum of the `k` previous values per week elapsed since visit `t-k`.
    RollingRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagDerivation {
    pub source: String,
    pub kind: LagKind,
    pub k: usize,
    pub output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LagSpec {
    derivations: Vec<LagDerivation>,
}

impl LagSpec {
    pub fn new(derivations: Vec<LagDerivation>) -> Result<Self> {
        for d in &derivations {
            if d.k == 0 {
                return Err(DatasetError::InvalidLag(format!(
                    "`{}` requests k = 0; k must be at least 1",
                    d.output
                )));
            }
        }
        Ok(Self { derivations })
    }

    pub fn derivations(&self) -> &[LagDerivation] {
        &self.derivations
    }
}

/// Appends lagged columns computed within each patient's visit sequence.
/// Existing columns and row order are untouched.
pub fn derive_lags(d: &Dataset, spec: &LagSpec) -> Result<Dataset> {
    let mut out = d.clone();
    for der in &spec.derivations {
        let src = d.feature_index(&der.source)?;
        if out.schema.iter().any(|s| s == &der.output) {
            return Err(DatasetError::NameCollision(der.output.clone()));
        }
        let mut values = vec![None; d.records.len()];
        let mut start = 0;
        while start < d.records.len() {
            let pid = &d.records[start].patient_id;
            let mut end = start;
            while end < d.records.len() && &d.records[end].patient_id == pid {
                end += 1;
            }
            let visits = &d.records[start..end];
            for t in 0..visits.len() {
                values[start + t] = lagged_value(visits, t, src, der);
            }
            start = end;
        }
        out = out.with_column(&der.output, values)?;
    }
    Ok(out)
}

fn lagged_value(visits: &[VisitRecord], t: usize, src: usize, der: &LagDerivation) -> Option<f64> {
    let k = der.k;
    match der.kind {
        LagKind::Lag => {
            let i = t.checked_sub(k)?;
            visits[i].features[src]
        }
        LagKind::Delta => {
            let i = t.checked_sub(k + 1)?;
            Some(visits[i + 1].features[src]? - visits[i].features[src]?)
        }
        LagKind::RollingRate => {
            let first = t.checked_sub(k)?;
            let mut sum = 0.0;
            for v in &visits[first..t] {
                sum += v.features[src]?;
            }
            let days = (visits[t].care_date - visits[first].care_date).num_days();
            if days <= 0 {
                return None;
            }
            Some(sum * 7.0 / days as f64)
        }
    }
}

/// Result of a temporal split; `empty_side` is set when either part is empty.
#[derive(Debug, Clone)]
pub struct TemporalSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub empty_side: bool,
}

/// Visits on or before `cutoff` train; later visits test.
pub fn temporal_split(d: &Dataset, cutoff: NaiveDate) -> TemporalSplit {
    let train = d.filter(|r| r.care_date <= cutoff);
    let test = d.filter(|r| r.care_date > cutoff);
    let empty_side = train.is_empty() || test.is_empty();
    TemporalSplit {
        train,
        test,
        empty_side,
    }
}

/// Ground truth for the synthetic generator.
///
/// `rules` partition the covariate box; each rule's model is evaluated at
/// the regressor values (`rules.regressors`, which must be covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub rules: RuleSet,
    pub covariates: Vec<FeatureRange>,
    pub sigma_b: f64,
    pub sigma: f64,
    pub n_clusters: usize,
    pub visits_per_cluster: usize,
    /// When set, an `Hb` column tracks the level entering each visit,
    /// starting from this value.
    #[serde(default)]
    pub hb_start: Option<f64>,
    pub start_date: NaiveDate,
    pub visit_interval_days: i64,
}

/// Name of the tracked hemoglobin level column.
pub const HB_COLUMN: &str = "Hb";
/// Default target name for synthetic data.
pub const TARGET_COLUMN: &str = "delta_Hb";

impl SyntheticTruth {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b >= 0.0) {
            return Err(DatasetError::InvalidTruth("sigma_b must be >= 0".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(DatasetError::InvalidTruth("sigma must be > 0".into()));
        }
        if self.n_clusters == 0 || self.visits_per_cluster == 0 {
            return Err(DatasetError::InvalidTruth("empty design".into()));
        }
        if self.visit_interval_days <= 0 {
            return Err(DatasetError::InvalidTruth("visit interval must be positive".into()));
        }
        for c in &self.covariates {
            if !(c.low <= c.high) || !c.low.is_finite() || !c.high.is_finite() {
                return Err(DatasetError::InvalidTruth(format!("bad range for `{}`", c.name)));
            }
        }
        let names: Vec<&str> = self.covariates.iter().map(|c| c.name.as_str()).collect();
        for reg in &self.rules.regressors {
            if !names.contains(&reg.as_str()) {
                return Err(DatasetError::UnknownFeature(reg.clone()));
            }
        }
        for rule in &self.rules.rules {
            for c in &rule.conditions {
                if !names.contains(&c.feature.as_str()) {
                    return Err(DatasetError::UnknownFeature(c.feature.clone()));
                }
            }
            if rule.model.beta1.len() != self.rules.regressors.len() {
                return Err(DatasetError::InvalidTruth(format!(
                    "rule {} has {} slopes for {} regressors",
                    rule.id,
                    rule.model.beta1.len(),
                    self.rules.regressors.len()
                )));
            }
        }
        if self.hb_start.is_some() && names.contains(&HB_COLUMN) {
            return Err(DatasetError::NameCollision(HB_COLUMN.into()));
        }
        Ok(())
    }

    /// Schema produced by [`generate_synthetic`].
    pub fn schema(&self) -> Vec<String> {
        let mut s: Vec<String> = self.covariates.iter().map(|c| c.name.clone()).collect();
        if self.hb_start.is_some() {
            s.push(HB_COLUMN.to_string());
        }
        s
    }

    /// Index of the planted rule containing `point` (covariate order).
    pub fn locate(&self, point: &[f64]) -> Result<usize> {
        let lookup = |name: &str| {
            self.covariates
                .iter()
                .position(|c| c.name == name)
                .map(|j| point[j])
        };
        let mut hit = None;
        let mut matches = 0;
        for (i, rule) in self.rules.rules.iter().enumerate() {
            if rule
                .conditions
                .iter()
                .all(|c| lookup(&c.feature).is_some_and(|v| c.holds(v)))
            {
                matches += 1;
                hit = Some(i);
            }
        }
        match (matches, hit) {
            (1, Some(i)) => Ok(i),
            _ => Err(DatasetError::NotAPartition { matches }),
        }
    }

    /// Noise-free expected target at `point` (covariate order), without
    /// any random intercept.
    pub fn expected(&self, point: &[f64]) -> Result<f64> {
        let rule = &self.rules.rules[self.locate(point)?];
        let regs = self
            .rules
            .regressors
            .iter()
            .map(|r| {
                let j = self.covariates.iter().position(|c| &c.name == r).unwrap();
                point[j]
            })
            .collect::<Vec<_>>();
        Ok(rule.model.eval(&regs))
    }

    /// Condition list of every planted rule, for threshold comparisons.
    pub fn planted_conditions(&self) -> impl Iterator<Item = &Condition> {
        self.rules.rules.iter().flat_map(|r| r.conditions.iter())
    }
}

/// Draws a clustered dataset from `truth`. Deterministic given `seed`.
///
/// For cluster `i` a random intercept `b_i ~ N(0, sigma_b^2)` is drawn once;
/// each visit draws covariates uniformly in their ranges and sets
/// `target = model(dose) + b_i + N(0, sigma^2)`.
pub fn generate_synthetic(truth: &SyntheticTruth, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, truth.sigma).expect("sigma validated");
    let intercepts = Normal::new(0.0, truth.sigma_b).expect("sigma_b validated");
    let mut records = Vec::with_capacity(truth.n_clusters * truth.visits_per_cluster);
    let mut point = vec![0.0; truth.covariates.len()];
    for i in 0..truth.n_clusters {
        let patient_id = format!("{:04}", i + 1);
        let b = intercepts.sample(&mut rng);
        let offset = rng.random_range(0..4 * truth.visit_interval_days);
        let mut hb = truth.hb_start;
        for v in 0..truth.visits_per_cluster {
            for (x, c) in point.iter_mut().zip(&truth.covariates) {
                *x = if c.high > c.low {
                    rng.random_range(c.low..c.high)
                } else {
                    c.low
                };
            }
            let target = truth.expected(&point)? + b + noise.sample(&mut rng);
            let mut features: Vec<Option<f64>> = point.iter().map(|&x| Some(x)).collect();
            if let Some(level) = hb.as_mut() {
                features.push(Some(*level));
                *level += target;
            }
            let care_date = truth.start_date
                + Duration::days(offset + v as i64 * truth.visit_interval_days);
            records.push(VisitRecord::observed(
                patient_id.clone(),
                care_date,
                features,
                Some(target),
            ));
        }
    }
    let d = Dataset::new(truth.schema(), TARGET_COLUMN, records)?;
    Ok((d, truth.clone()))
}

/// Groups row indices by patient, preserving first-appearance order.
pub fn cluster_index(ids: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut map: BTreeMap<&str, usize> = BTreeMap::new();
    let mut names = Vec::new();
    let idx = ids
        .iter()
        .map(|id| {
            *map.entry(id.as_str()).or_insert_with(|| {
                names.push(id.clone());
                names.len() - 1
            })
        })
        .collect();
    (idx, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    const FIG5: &str = "ID,Care_Date,Hb,EPO_dose,Previous_EPO_dose,delta_Hb\n\
        0001,2013-12-20,9.5,4,0,\n\
        0001,2014-01-03,10.8,4,4,1.3\n\
        0001,2014-01-24,12.2,1,4,1.4\n\
        5211,2020-05-28,11.7,1,3,\n";

    fn fig5_schema() -> Vec<String> {
        ["Hb", "EPO_dose", "Previous_EPO_dose"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn loads_excerpt() {
        let d = read_csv(FIG5.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        assert_eq!(d.n_records(), 4);
        assert_eq!(d.n_patients(), 2);
        assert_eq!(d.records()[3].patient_id, "5211");
        assert_eq!(d.records()[0].target, None);
        assert_eq!(d.value(2, "EPO_dose").unwrap(), Some(1.0));
    }

    #[test]
    fn empty_file_with_header() {
        let csv = "ID,Care_Date,Hb,EPO_dose,Previous_EPO_dose,delta_Hb\n";
        let d = read_csv(csv.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        assert_eq!(d.n_records(), 0);
        assert_eq!(d.n_patients(), 0);
    }

    #[test]
    fn duplicate_visit_names_both_rows() {
        let csv = format!("{FIG5}0001,2013-12-20,9.9,2,0,0.1\n");
        let err = read_csv(csv.as_bytes(), &fig5_schema(), "delta_Hb").unwrap_err();
        match err {
            DatasetError::DuplicateVisit {
                first_row,
                second_row,
                ..
            } => assert_eq!((first_row, second_row), (1, 5)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_inputs_report_rows() {
        let bad_num = "ID,Care_Date,Hb,EPO_dose,Previous_EPO_dose,delta_Hb\n0001,2013-12-20,9.x,4,0,\n";
        assert!(matches!(
            read_csv(bad_num.as_bytes(), &fig5_schema(), "delta_Hb"),
            Err(DatasetError::MalformedNumeric { row: 1, .. })
        ));
        let bad_date = "ID,Care_Date,Hb,EPO_dose,Previous_EPO_dose,delta_Hb\n0001,2013-12-20,9,4,0,\n0001,20/12/2013,9,4,0,\n";
        assert!(matches!(
            read_csv(bad_date.as_bytes(), &fig5_schema(), "delta_Hb"),
            Err(DatasetError::MalformedDate { row: 2, .. })
        ));
        let no_col = "ID,Care_Date,Hb,delta_Hb\n";
        assert!(matches!(
            read_csv(no_col.as_bytes(), &fig5_schema(), "delta_Hb"),
            Err(DatasetError::MissingColumn(c)) if c == "EPO_dose"
        ));
    }

    #[test]
    fn csv_round_trip() {
        let d = read_csv(FIG5.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &fig5_schema(), "delta_Hb").unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn schema_from_header() {
        assert_eq!(header_schema(FIG5.as_bytes(), "delta_Hb").unwrap(), fig5_schema());
        assert!(matches!(
            header_schema("ID,x\n".as_bytes(), "delta_Hb"),
            Err(DatasetError::MissingColumn(_))
        ));
    }

    #[test]
    fn delta_lag_on_excerpt() {
        let d = read_csv(FIG5.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        let spec = LagSpec::new(vec![
            LagDerivation {
                source: "Hb".into(),
                kind: LagKind::Delta,
                k: 1,
                output: "ΔHb_1_visit_before".into(),
            },
            LagDerivation {
                source: "EPO_dose".into(),
                kind: LagKind::Lag,
                k: 1,
                output: "EPO_dose_prev".into(),
            },
        ])
        .unwrap();
        let out = derive_lags(&d, &spec).unwrap();
        let delta = out.value(2, "ΔHb_1_visit_before").unwrap().unwrap();
        assert!((delta - 1.3).abs() < 1e-12);
        assert_eq!(out.value(0, "ΔHb_1_visit_before").unwrap(), None);
        assert_eq!(out.value(1, "ΔHb_1_visit_before").unwrap(), None);
        // single-visit patient
        assert_eq!(out.value(3, "EPO_dose_prev").unwrap(), None);
        assert_eq!(out.value(2, "EPO_dose_prev").unwrap(), Some(4.0));
        // existing columns untouched
        for (a, b) in d.records().iter().zip(out.records()) {
            assert_eq!(a.features[..], b.features[..3]);
        }
    }

    #[test]
    fn rolling_rate_per_week() {
        let d = read_csv(FIG5.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        let spec = LagSpec::new(vec![LagDerivation {
            source: "EPO_dose".into(),
            kind: LagKind::RollingRate,
            k: 2,
            output: "EPO_rate_2".into(),
        }])
        .unwrap();
        let out = derive_lags(&d, &spec).unwrap();
        // visits 1-2 dosed 4 + 4 over 35 days before visit 3
        let v = out.value(2, "EPO_rate_2").unwrap().unwrap();
        assert!((v - 8.0 * 7.0 / 35.0).abs() < 1e-12);
    }

    #[test]
    fn lag_errors() {
        assert!(LagSpec::new(vec![LagDerivation {
            source: "Hb".into(),
            kind: LagKind::Lag,
            k: 0,
            output: "x".into(),
        }])
        .is_err());
        let d = read_csv(FIG5.as_bytes(), &fig5_schema(), "delta_Hb").unwrap();
        let unknown = LagSpec::new(vec![LagDerivation {
            source: "nope".into(),
            kind: LagKind::Lag,
            k: 1,
            output: "x".into(),
        }])
        .unwrap();
        assert!(matches!(derive_lags(&d, &unknown), Err(DatasetError::UnknownFeature(_))));
        let collide = LagSpec::new(vec![LagDerivation {
            source: "Hb".into(),
            kind: LagKind::Lag,
            k: 1,
            output: "EPO_dose".into(),
        }])
        .unwrap();
        assert!(matches!(derive_lags(&d, &collide), Err(DatasetError::NameCollision(_))));
    }

    #[test]
    fn split_by_date() {
        let recs = (1..=5)
            .map(|i| {
                VisitRecord::observed(
                    "p",
                    date(&format!("2020-01-0{i}")),
                    vec![Some(i as f64)],
                    Some(0.0),
                )
            })
            .collect();
        let d = Dataset::new(vec!["x".into()], "y", recs).unwrap();
        let s = temporal_split(&d, date("2020-01-03"));
        assert_eq!(s.train.n_records(), 3);
        assert_eq!(s.test.n_records(), 2);
        assert!(!s.empty_side);
        assert_eq!(s.test.records()[0].features[0], Some(4.0));

        let s = temporal_split(&d, date("2019-12-31"));
        assert_eq!((s.train.n_records(), s.test.n_records()), (0, 5));
        assert!(s.empty_side);
    }
}
