//! Volumetric baseline: partial-volume segmentation of the bright structure
//! and its annualised volume change.

use deepatrophy_core::synth::{mask_volume, segment_structure};
use deepatrophy_core::Volume3D;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StatsError};
use crate::progression::DAYS_PER_YEAR;

/// Intensities at or below `lo` count as background, at or above `hi` as
/// structure, linearly in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub lo: f64,
    pub hi: f64,
}

impl SegmentConfig {
    /// Thresholds at 20% and 80% of the way from background to structure.
    pub fn from_levels(background: f64, structure: f64) -> Self {
        let d = structure - background;
        Self {
            lo: background + 0.2 * d,
            hi: background + 0.8 * d,
        }
    }
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self::from_levels(0.3, 1.0)
    }
}

/// Structure volume in mm^3.
pub fn segment_volume(v: &Volume3D, cfg: &SegmentConfig) -> Result<f64> {
    if !(cfg.hi > cfg.lo) {
        return Err(StatsError::Invalid(format!("segmentation needs hi > lo, got {cfg:?}")));
    }
    Ok(mask_volume(&segment_structure(v, cfg.lo as f32, cfg.hi as f32)))
}

/// `(V(t2) - V(t1)) / V(t1) / (dt / 365.25)` in percent per year, with
/// `dt = t2 - t1` signed.
pub fn baseline_volume_change(at_t1: &Volume3D, at_t2: &Volume3D, dt_days: f64, cfg: &SegmentConfig) -> Result<f64> {
    at_t1.check_same_dims(at_t2)?;
    if dt_days == 0.0 || !dt_days.is_finite() {
        return Err(StatsError::Undefined(format!(
            "annualised change needs a nonzero interval, got {dt_days}"
        )));
    }
    let v1 = segment_volume(at_t1, cfg)?;
    let v2 = segment_volume(at_t2, cfg)?;
    if v1 <= 0.0 {
        return Err(StatsError::Undefined("zero baseline volume".into()));
    }
    Ok(100.0 * (v2 - v1) / v1 / (dt_days / DAYS_PER_YEAR))
}
