//! Inter-rater reliability: interval Krippendorff's alpha, a unit-level
//! bootstrap interval and the gate that guards advice merging.

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sub_seed;

pub const DEFAULT_THRESHOLD: f64 = 0.667;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("no unit has two or more ratings")]
    NotPairable,
    #[error("non-finite rating for unit `{unit}` by `{rater}`")]
    NonFinite { unit: String, rater: String },
    #[error("unit `{unit}` rated twice by `{rater}`")]
    DuplicateRating { unit: String, rater: String },
    #[error("need at least 100 bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("confidence level must be in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: cannot parse `{value}` as a rating")]
    Malformed { row: usize, value: String },
}

pub type Result<T> = std::result::Result<T, AgreementError>;

/// Units × raters grid of optional interval ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    pub unit_ids: Vec<String>,
    pub rater_ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Deserialize)]
struct LongRow {
    unit_id: String,
    rater_id: String,
    value: Option<String>,
}

impl RatingsMatrix {
    /// Builds the grid from `(unit, rater, value)` triples. Units and raters
    /// keep first-appearance order.
    pub fn from_long<I, U, R>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (U, R, Option<f64>)>,
        U: Into<String>,
        R: Into<String>,
    {
        let mut unit_ids: Vec<String> = Vec::new();
        let mut rater_ids: Vec<String> = Vec::new();
        let mut unit_at: BTreeMap<String, usize> = BTreeMap::new();
        let mut rater_at: BTreeMap<String, usize> = BTreeMap::new();
        let mut cells: BTreeMap<(usize, usize), Option<f64>> = BTreeMap::new();
        for (u, r, v) in rows {
            let (u, r) = (u.into(), r.into());
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(AgreementError::NonFinite { unit: u, rater: r });
            }
            let ui = *unit_at.entry(u.clone()).or_insert_with(|| {
                unit_ids.push(u.clone());
                unit_ids.len() - 1
            });
            let ri = *rater_at.entry(r.clone()).or_insert_with(|| {
                rater_ids.push(r.clone());
                rater_ids.len() - 1
            });
            if cells.insert((ui, ri), v).is_some() {
                return Err(AgreementError::DuplicateRating { unit: u, rater: r });
            }
        }
        let mut values = vec![vec![None; rater_ids.len()]; unit_ids.len()];
        for ((u, r), v) in cells {
            values[u][r] = v;
        }
        let m = Self {
            unit_ids,
            rater_ids,
            values,
        };
        m.check()?;
        Ok(m)
    }

    /// Reads long-format CSV with columns `unit_id,rater_id,value`; an
    /// empty value is a missing rating.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for (k, rec) in rdr.deserialize::<LongRow>().enumerate() {
            let rec = rec?;
            let value = match rec.value.as_deref() {
                None | Some("") => None,
                Some(s) => Some(s.parse::<f64>().map_err(|_| AgreementError::Malformed {
                    row: k + 2,
                    value: s.to_string(),
                })?),
            };
            rows.push((rec.unit_id, rec.rater_id, value));
        }
        Self::from_long(rows)
    }

    fn check(&self) -> Result<()> {
        for (u, row) in self.values.iter().enumerate() {
            for (r, v) in row.iter().enumerate() {
                if v.is_some_and(|v| !v.is_finite()) {
                    return Err(AgreementError::NonFinite {
                        unit: self.unit_ids[u].clone(),
                        rater: self.rater_ids[r].clone(),
                    });
                }
            }
        }
        if self.pairable_units().is_empty() {
            return Err(AgreementError::NotPairable);
        }
        Ok(())
    }

    /// Ratings of each unit holding at least two values.
    pub fn pairable_units(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
            .filter(|v| v.len() >= 2)
            .collect()
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }
}

/// Sum of squared deviations, computed on values shifted by the first so
/// identical values give exactly zero.
fn m2(values: &[f64]) -> f64 {
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - shift - mean).powi(2)).sum()
}

/// Observed and expected disagreement over pairable units.
fn disagreements(units: &[&[f64]]) -> (f64, f64) {
    let n: usize = units.iter().map(|u| u.len()).sum();
    let n_f = n as f64;
    let d_o = units
        .iter()
        .map(|u| {
            let m = u.len() as f64;
            2.0 * m * m2(u) / (m - 1.0)
        })
        .sum::<f64>()
        / n_f;
    let pooled: Vec<f64> = units.iter().flat_map(|u| u.iter().copied()).collect();
    let d_e = 2.0 * m2(&pooled) / (n_f - 1.0);
    (d_o, d_e)
}

/// Point estimate and its degeneracy flag (`D_e = 0` gives alpha 1).
fn alpha_of(units: &[&[f64]]) -> (f64, bool) {
    let (d_o, d_e) = disagreements(units);
    if d_e == 0.0 {
        (1.0, true)
    } else {
        (1.0 - d_o / d_e, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub alpha: f64,
    /// Percentile bootstrap interval, when computed.
    pub ci: Option<(f64, f64)>,
    pub level: f64,
    pub n_units: usize,
    pub n_raters: usize,
    /// Number of values in units with two or more ratings.
    pub n_pairable: usize,
    /// All pooled values were identical, so alpha is 1 by convention.
    pub degenerate: bool,
}

/// Interval-metric Krippendorff's alpha.
pub fn krippendorff_alpha(m: &RatingsMatrix) -> Result<AgreementResult> {
    m.check()?;
    let units = m.pairable_units();
    let refs: Vec<&[f64]> = units.iter().map(|u| u.as_slice()).collect();
    let (alpha, degenerate) = alpha_of(&refs);
    Ok(AgreementResult {
        alpha,
        ci: None,
        level: DEFAULT_LEVEL,
        n_units: m.unit_ids.len(),
        n_raters: m.rater_ids.len(),
        n_pairable: units.iter().map(Vec::len).sum(),
        degenerate,
    })
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Percentile interval from resampling pairable units with replacement.
/// Replicate `i` draws from `sub_seed(seed, i)`.
pub fn bootstrap_ci(m: &RatingsMatrix, replicates: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if replicates < 100 {
        return Err(AgreementError::TooFewReplicates(replicates));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(AgreementError::InvalidLevel(level));
    }
    let point = krippendorff_alpha(m)?;
    if point.degenerate {
        return Ok((1.0, 1.0));
    }
    let units = m.pairable_units();
    let k = units.len();
    let mut reps: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64));
            let draw: Vec<&[f64]> = (0..k).map(|_| units[rng.random_range(0..k)].as_slice()).collect();
            alpha_of(&draw).0
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&reps, tail), percentile(&reps, 1.0 - tail)))
}

/// Alpha with its bootstrap interval.
pub fn agreement_with_ci(m: &RatingsMatrix, replicates: usize, level: f64, seed: u64) -> Result<AgreementResult> {
    let mut r = krippendorff_alpha(m)?;
    r.ci = Some(bootstrap_ci(m, replicates, level, seed)?);
    r.level = level;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub pass: bool,
    pub threshold: f64,
    pub result: AgreementResult,
}

/// Passes iff alpha reaches `threshold`.
pub fn reliability_gate(
    m: &RatingsMatrix,
    threshold: f64,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<GateResult> {
    let result = agreement_with_ci(m, replicates, level, seed)?;
    Ok(GateResult {
        pass: result.alpha >= threshold,
        threshold,
        result,
    })
}

/// Test-retest agreement of one rater: `(unit, occasion, value)` triples
/// are treated as units × occasions.
pub fn intra_rater_alpha<I, U, R>(rows: I) -> Result<AgreementResult>
where
    I: IntoIterator<Item = (U, R, Option<f64>)>,
    U: Into<String>,
    R: Into<String>,
{
    krippendorff_alpha(&RatingsMatrix::from_long(rows)?)
}
