//! Order and interval accuracy, ROC AUC and DeLong's paired AUC test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, StatsError};

/// Fraction of predicted order classes equal to the labels.
pub fn sto_accuracy(predicted: &[u8], labels: &[u8]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(StatsError::Invalid(format!(
            "need equal nonempty predictions and labels, got {} and {}",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Order call of a volumetric measure: a pair is called chronological
/// (label 1) when the slot 1 volume is smaller than the slot 0 volume.
pub fn order_from_volume_change(change: f64) -> u8 {
    u8::from(change < 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RisiAccuracy {
    pub accuracy: f64,
    pub n: usize,
    /// Quads skipped because their two actual intervals are equal.
    pub excluded: usize,
}

/// Fraction of quads where the pair with the larger predicted magnitude
/// also has the larger actual interval. Inputs are `(pair1, pair2)`.
pub fn risi_accuracy(predicted: &[(f64, f64)], actual: &[(f64, f64)]) -> Result<RisiAccuracy> {
    if predicted.len() != actual.len() {
        return Err(StatsError::Invalid("predicted and actual quad counts differ".into()));
    }
    let (mut hits, mut n, mut excluded) = (0.0, 0, 0);
    for (p, a) in predicted.iter().zip(actual) {
        let (a1, a2) = (a.0.abs(), a.1.abs());
        if a1 == a2 {
            excluded += 1;
            continue;
        }
        n += 1;
        let (p1, p2) = (p.0.abs(), p.1.abs());
        if p1 == p2 {
            hits += 0.5;
        } else if (p1 > p2) == (a1 > a2) {
            hits += 1.0;
        }
    }
    if n == 0 {
        return Err(StatsError::Invalid(format!(
            "no quads with unequal intervals ({excluded} excluded)"
        )));
    }
    Ok(RisiAccuracy {
        accuracy: hits / n as f64,
        n,
        excluded,
    })
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(StatsError::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StatsError::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StatsError::Invalid(format!(
            "ROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Midranks (1-based) of `v`, ties sharing their average rank.
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: `P(score+ > score-) + 0.5 P(tie)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let ranks = midranks(scores);
    let rsum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rsum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    /// `auc_a - auc_b`.
    pub diff: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Structural components: for each positive the fraction of negatives it
/// beats, for each negative the fraction of positives that beat it.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let psi = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong's test for two correlated AUCs on the same samples, two-sided.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLong> {
    let (pos, neg) = check_binary(scores_a, labels)?;
    check_binary(scores_b, labels)?;
    if pos < 2 || neg < 2 {
        return Err(StatsError::Invalid(
            "DeLong needs at least two samples per class".into(),
        ));
    }
    let tied = |s: &[f64]| s.iter().all(|&v| v == s[0]);
    if tied(scores_a) || tied(scores_b) {
        return Err(StatsError::Undefined(
            "all scores tied; DeLong variance is degenerate".into(),
        ));
    }
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let auc_a = a10.iter().sum::<f64>() / pos as f64;
    let auc_b = b10.iter().sum::<f64>() / pos as f64;
    let diff = auc_a - auc_b;
    let var = (cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10)) / pos as f64
        + (cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01)) / neg as f64;
    if var <= 1e-15 {
        if diff.abs() <= 1e-15 {
            return Ok(DeLong {
                auc_a,
                auc_b,
                diff: 0.0,
                z: 0.0,
                p_value: 1.0,
            });
        }
        return Err(StatsError::Undefined(
            "zero variance with a nonzero AUC difference".into(),
        ));
    }
    let z = diff / var.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * normal.sf(z.abs())).min(1.0);
    Ok(DeLong {
        auc_a,
        auc_b,
        diff,
        z,
        p_value,
    })
}
