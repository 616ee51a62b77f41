//! Volumetric SSIM and the quality-control gate applied to registered pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// SSIM rejection threshold: pairs with `ssim < 0.6` are dropped.
pub const DEFAULT_QC_THRESHOLD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    /// Edge length of the cubic sliding window, in voxels.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Summed-volume table with a zero border: `t[(i,j,k)]` is the sum over
/// voxels with indices strictly below `(i,j,k)`.
struct Integral {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], value: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut t = vec![0.0f64; sx * sy * (nz + 1)];
        for k in 0..nz {
            for j in 0..ny {
                let mut row = 0.0;
                for i in 0..nx {
                    row += value(i + nx * (j + ny * k));
                    let idx = (i + 1) + sx * ((j + 1) + sy * (k + 1));
                    t[idx] = row + t[idx - sx] + t[idx - sx * sy] - t[idx - sx - sx * sy];
                }
            }
        }
        Self { dims, t }
    }

    #[inline]
    fn box_sum(&self, lo: [usize; 3], w: usize) -> f64 {
        let sx = self.dims[0] + 1;
        let sy = self.dims[1] + 1;
        let at = |i: usize, j: usize, k: usize| self.t[i + sx * (j + sy * k)];
        let [a, b, c] = lo;
        let [x, y, z] = [a + w, b + w, c + w];
        at(x, y, z) - at(a, y, z) - at(x, b, z) - at(x, y, c) + at(a, b, z) + at(a, y, c) + at(x, b, c) - at(a, b, c)
    }
}

/// Mean SSIM over all fully-contained `window³` windows. The dynamic range
/// `L` is the joint intensity range of both volumes.
pub fn ssim(a: &Volume3D, b: &Volume3D, cfg: &SsimConfig) -> Result<f64> {
    a.check_same_dims(b)?;
    let dims = a.dims();
    let w = cfg.window;
    if w == 0 || dims.iter().any(|&d| d < w) {
        return Err(Error::Config(format!(
            "SSIM window {w} does not fit volume dims {dims:?}"
        )));
    }
    let (alo, ahi) = a.min_max();
    let (blo, bhi) = b.min_max();
    let range = (ahi.max(bhi) - alo.min(blo)) as f64;
    let range = if range > 0.0 { range } else { 1.0 };
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let (da, db) = (a.data(), b.data());
    let sa = Integral::new(dims, |i| da[i] as f64);
    let sb = Integral::new(dims, |i| db[i] as f64);
    let saa = Integral::new(dims, |i| (da[i] as f64).powi(2));
    let sbb = Integral::new(dims, |i| (db[i] as f64).powi(2));
    let sab = Integral::new(dims, |i| da[i] as f64 * db[i] as f64);
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..=dims[2] - w {
        for j in 0..=dims[1] - w {
            for i in 0..=dims[0] - w {
                let lo = [i, j, k];
                let mx = sa.box_sum(lo, w) / n;
                let my = sb.box_sum(lo, w) / n;
                let vx = saa.box_sum(lo, w) / n - mx * mx;
                let vy = sbb.box_sum(lo, w) / n - my * my;
                let cxy = sab.box_sum(lo, w) / n - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcDecision {
    pub pair_id: String,
    pub ssim: f64,
    pub accepted: bool,
    pub threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub accepted: Vec<QcDecision>,
    pub rejected: Vec<QcDecision>,
}

impl QcReport {
    pub fn total(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }

    /// `pair_id,ssim,accepted` with one row per pair, accepted rows first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair_id,ssim,accepted\n");
        for d in self.accepted.iter().chain(&self.rejected) {
            let _ = writeln!(s, "{},{:.6},{}", d.pair_id, d.ssim, d.accepted);
        }
        s
    }
}

/// Partitions pairs by `ssim >= threshold`.
pub fn qc_gate(pairs: impl IntoIterator<Item = (String, f64)>, threshold: f64) -> QcReport {
    let mut report = QcReport::default();
    for (pair_id, s) in pairs {
        let accepted = s >= threshold;
        let d = QcDecision {
            pair_id,
            ssim: s,
            accepted,
            threshold,
        };
        if accepted {
            report.accepted.push(d);
        } else {
            report.rejected.push(d);
        }
    }
    report
}
