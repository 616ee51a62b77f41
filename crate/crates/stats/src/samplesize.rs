//! Per-arm clinical trial sample size for detecting a fractional reduction
//! of the disease-specific rate, with percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, StatsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrialDesign {
    /// Two-sided significance level.
    pub alpha: f64,
    pub power: f64,
    /// Fraction of the excess rate the treatment removes.
    pub reduction: f64,
}

impl Default for TrialDesign {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            power: 0.8,
            reduction: 0.25,
        }
    }
}

impl TrialDesign {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.alpha) || !open(self.power) || !(self.reduction > 0.0 && self.reduction <= 1.0) {
            return Err(StatsError::Invalid(format!("invalid trial design {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mean_pat: f64,
    pub mean_ctl: f64,
    /// Sample standard deviation of the patient group.
    pub sd_pat: f64,
    pub n_pat: usize,
    pub n_ctl: usize,
}

impl CohortStats {
    pub fn from_samples(pat: &[f64], ctl: &[f64]) -> Result<Self> {
        if pat.len() < 2 || ctl.is_empty() {
            return Err(StatsError::Invalid(format!(
                "need >= 2 patients and >= 1 control, got {} and {}",
                pat.len(),
                ctl.len()
            )));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mp = mean(pat);
        let sd = (pat.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / (pat.len() - 1) as f64).sqrt();
        Ok(Self {
            mean_pat: mp,
            mean_ctl: mean(ctl),
            sd_pat: sd,
            n_pat: pat.len(),
            n_ctl: ctl.len(),
        })
    }
}

/// `[(z_{1-alpha/2} + z_power) S / (reduction (mean_pat - mean_ctl))]^2`
/// before rounding.
pub fn sample_size_raw(stats: &CohortStats, design: &TrialDesign) -> Result<f64> {
    design.validate()?;
    let diff = stats.mean_pat - stats.mean_ctl;
    if diff == 0.0 || !diff.is_finite() {
        return Err(StatsError::Undefined("patient and control means are equal".into()));
    }
    if !(stats.sd_pat >= 0.0) {
        return Err(StatsError::Invalid(format!(
            "patient sd must be >= 0, got {}",
            stats.sd_pat
        )));
    }
    let n = Normal::standard();
    let z = n.inverse_cdf(1.0 - design.alpha / 2.0) + n.inverse_cdf(design.power);
    Ok((z * stats.sd_pat / (design.reduction * diff)).powi(2))
}

/// Participants per arm, rounded up.
pub fn sample_size(stats: &CohortStats, design: &TrialDesign) -> Result<u64> {
    Ok(sample_size_raw(stats, design)?.ceil() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: u64,
    pub lo: f64,
    pub hi: f64,
    /// Replicates with equal resampled means, recorded as `+inf`.
    pub infinite: usize,
}

/// Percentile 95% interval of the rounded sample size over `b` resamples
/// of both groups. Replicate `i` draws from ChaCha stream `i` of `seed`.
pub fn bootstrap_ci(pat: &[f64], ctl: &[f64], design: &TrialDesign, b: usize, seed: u64) -> Result<BootstrapCi> {
    if b < 200 {
        return Err(StatsError::Invalid(format!(
            "bootstrap needs >= 200 replicates, got {b}"
        )));
    }
    let estimate = sample_size(&CohortStats::from_samples(pat, ctl)?, design)?;
    let mut reps: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let rp: Vec<f64> = (0..pat.len()).map(|_| pat[rng.random_range(0..pat.len())]).collect();
            let rc: Vec<f64> = (0..ctl.len()).map(|_| ctl[rng.random_range(0..ctl.len())]).collect();
            let stats = CohortStats::from_samples(&rp, &rc).expect("sizes checked above");
            match sample_size(&stats, design) {
                Ok(n) => n as f64,
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let infinite = reps.iter().filter(|v| v.is_infinite()).count();
    reps.sort_by(f64::total_cmp);
    // nearest-rank percentiles
    let rank = |q: f64| reps[((q * b as f64).ceil() as usize).clamp(1, b) - 1];
    Ok(BootstrapCi {
        estimate,
        lo: rank(0.025),
        hi: rank(0.975),
        infinite,
    })
}
