//! Predicted interscan interval (PII) from activations, the PII-to-interval
//! ratio (PAIRR), per-subject summary slopes and age correction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StatsError};
use crate::ols::ols;

pub const DAYS_PER_YEAR: f64 = 365.25;
const COLUMNS: [&str; 6] = ["intercept", "x1", "x2", "x3", "x4", "x5"];

/// `PII = b0 + b1 x1 + ... + b5 x5`, in days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiiModel {
    pub beta: [f64; 6],
    pub n_pairs: usize,
    pub residual_sd: f64,
    /// Standard errors of `beta`.
    pub std_errors: [f64; 6],
    /// Indices into `beta` of all-zero activations, fixed at 0.
    pub pinned: Vec<usize>,
}

/// Least-squares fit of signed intervals (days) on the five activations.
pub fn fit_pii_model(acts: &[[f64; 5]], signed_intervals: &[f64]) -> Result<PiiModel> {
    if acts.len() != signed_intervals.len() {
        return Err(StatsError::Invalid(format!(
            "{} activation vectors for {} intervals",
            acts.len(),
            signed_intervals.len()
        )));
    }
    if acts.len() < 6 {
        return Err(StatsError::Invalid(format!(
            "need at least 6 pairs, got {}",
            acts.len()
        )));
    }
    // An activation that is exactly zero on every pair carries no
    // information; its coefficient is pinned to 0 (the minimum-norm solution).
    let active: Vec<usize> = (0..5).filter(|&j| acts.iter().any(|a| a[j] != 0.0)).collect();
    let mut names = vec![COLUMNS[0]];
    names.extend(active.iter().map(|&j| COLUMNS[j + 1]));
    let x = DMatrix::from_fn(acts.len(), names.len(), |i, c| {
        if c == 0 {
            1.0
        } else {
            acts[i][active[c - 1]]
        }
    });
    let fit = ols(&x, signed_intervals, &names)?;
    let mut beta = [0.0; 6];
    let mut std_errors = [0.0; 6];
    for (c, k) in std::iter::once(0).chain(active.iter().map(|j| j + 1)).enumerate() {
        beta[k] = fit.coef[c];
        std_errors[k] = fit.covariance[(c, c)].sqrt();
    }
    Ok(PiiModel {
        beta,
        n_pairs: acts.len(),
        residual_sd: fit.residual_sd,
        std_errors,
        pinned: (0..5).filter(|j| !active.contains(j)).map(|j| j + 1).collect(),
    })
}

pub fn predict_pii(model: &PiiModel, act: &[f64; 5]) -> f64 {
    model.beta[0] + act.iter().zip(&model.beta[1..]).map(|(x, b)| x * b).sum::<f64>()
}

/// `PII / dt`; an undefined ratio for a zero interval.
pub fn pairr(pii_days: f64, signed_interval_days: f64) -> Result<f64> {
    if signed_interval_days == 0.0 || !signed_interval_days.is_finite() {
        return Err(StatsError::Undefined(format!(
            "PAIRR needs a nonzero interval, got {signed_interval_days}"
        )));
    }
    Ok(pii_days / signed_interval_days)
}

/// Half-open window `[lo, hi)` of follow-up days.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t < self.hi
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

/// Per-year slope of the least-squares line through `(0, baseline)` and the
/// follow-ups `(t_days, value)` with `t_days > 0`.
pub fn summary_slope(points: &[(f64, f64)], baseline: f64) -> Result<f64> {
    let follow: Vec<&(f64, f64)> = points.iter().filter(|(t, _)| *t > 0.0).collect();
    if follow.is_empty() {
        return Err(StatsError::MissingData("no follow-up measurements".into()));
    }
    let stt: f64 = follow.iter().map(|(t, _)| t * t).sum();
    let stv: f64 = follow.iter().map(|(t, v)| t * (v - baseline)).sum();
    Ok(stv / stt * DAYS_PER_YEAR)
}

/// `value = intercept + slope * age`, fitted on controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeModel {
    pub intercept: f64,
    pub slope: f64,
}

impl AgeModel {
    pub fn fit(controls: &[(f64, f64)]) -> Result<Self> {
        if controls.len() < 3 {
            return Err(StatsError::Invalid(format!(
                "age correction needs >= 3 controls, got {}",
                controls.len()
            )));
        }
        let n = controls.len() as f64;
        let ma = controls.iter().map(|p| p.0).sum::<f64>() / n;
        let mv = controls.iter().map(|p| p.1).sum::<f64>() / n;
        let saa: f64 = controls.iter().map(|p| (p.0 - ma).powi(2)).sum();
        if saa <= 1e-12 * n * ma.abs().max(1.0).powi(2) {
            return Err(StatsError::Singular("control ages have zero variance".into()));
        }
        let sav: f64 = controls.iter().map(|p| (p.0 - ma) * (p.1 - mv)).sum();
        let slope = sav / saa;
        Ok(Self {
            intercept: mv - slope * ma,
            slope,
        })
    }

    pub fn residual(&self, age: f64, value: f64) -> f64 {
        value - (self.intercept + self.slope * age)
    }
}

/// Residualises every `(age, value)` against the control fit.
pub fn age_correct(controls: &[(f64, f64)], all: &[(f64, f64)]) -> Result<(AgeModel, Vec<f64>)> {
    let m = AgeModel::fit(controls)?;
    Ok((m, all.iter().map(|&(a, v)| m.residual(a, v)).collect()))
}
