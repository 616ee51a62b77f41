//! Student's t-test and the exact binomial test against chance.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, StatsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided unpaired t-test; pooled variance unless `welch`.
pub fn two_sample_t(a: &[f64], b: &[f64], welch: bool) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::Invalid(format!(
            "t-test needs >= 2 per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite observation".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (se, df) = if welch {
        let (qa, qb) = (va / na, vb / nb);
        let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
        ((qa + qb).sqrt(), df)
    } else {
        let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        ((sp * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
    };
    if !(se > 0.0) {
        return Err(StatsError::Undefined("zero pooled variance".into()));
    }
    let t = (ma - mb) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::Invalid(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Exact two-sided binomial p: total probability of outcomes no more likely
/// than `k` under `Binomial(n, p0)`.
pub fn binomial_chance_test(k: u64, n: u64, p0: f64) -> Result<f64> {
    if k > n || !(0.0..=1.0).contains(&p0) {
        return Err(StatsError::Invalid(format!(
            "need 0 <= k <= n and p0 in [0, 1], got k={k}, n={n}, p0={p0}"
        )));
    }
    if p0 == 0.0 || p0 == 1.0 {
        let certain = if p0 == 0.0 { 0 } else { n };
        return Ok(if k == certain { 1.0 } else { 0.0 });
    }
    let ln_pmf = |i: u64| ln_choose(n, i) + i as f64 * p0.ln() + (n - i) as f64 * (1.0 - p0).ln();
    let observed = ln_pmf(k);
    // relative slack so outcomes tied in exact arithmetic are counted
    let cutoff = observed + (1.0 + 1e-7f64).ln();
    let included: Vec<f64> = (0..=n).map(ln_pmf).filter(|&l| l <= cutoff).collect();
    if included.len() as u64 == n + 1 {
        return Ok(1.0);
    }
    Ok(included.into_iter().map(f64::exp).sum::<f64>().min(1.0))
}
