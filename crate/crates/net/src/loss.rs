//! Softmax cross-entropy losses for temporal order (STO) and relative
//! interval (RISI) heads.

use serde::{Deserialize, Serialize};

use crate::config::{N_CATEGORIES, N_OUTPUTS};
use crate::error::{NetError, Result};
use crate::real::Real;

/// The five outputs of the basic subnetwork for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationVector(pub [f64; N_OUTPUTS]);

impl ActivationVector {
    /// The two STO logits.
    pub fn sto_logits(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    /// Predicted STO class: 1 means slot 1 is the later scan.
    pub fn sto_class(&self) -> u8 {
        u8::from(self.0[1] > self.0[0])
    }

    /// Margin for the chronological class, usable as a ROC score.
    pub fn sto_score(&self) -> f64 {
        self.0[1] - self.0[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_sto: f64,
    pub w_risi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_sto: 1.0,
            w_risi: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_sto >= 0.0 && self.w_risi >= 0.0) || !self.w_sto.is_finite() || !self.w_risi.is_finite() {
            return Err(NetError::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        if self.w_sto == 0.0 && self.w_risi == 0.0 {
            return Err(NetError::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Cross-entropy of `logits` against `class`, with its gradient.
pub(crate) fn ce_with_grad<T: Real>(logits: &[T], class: usize) -> (T, Vec<T>) {
    let (imax, m) = logits.iter().enumerate().fold(
        (0, T::neg_infinity()),
        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
    );
    let mut rest = T::zero();
    for (i, &v) in logits.iter().enumerate() {
        if i != imax {
            rest = rest + (v - m).exp();
        }
    }
    // log-sum-exp minus the max, exact for tiny tails
    let lse = rest.ln_1p();
    let loss = (m - logits[class]) + lse;
    let denom = T::one() + rest;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - m).exp() / denom - if i == class { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NetError::Numerical(format!("non-finite {what}: {values:?}")));
    }
    Ok(())
}

/// Cross-entropy over the first two activations; class index = label.
pub fn sto_loss(act: &ActivationVector, label: u8) -> Result<f64> {
    check_finite(&act.0, "activations")?;
    if label > 1 {
        return Err(NetError::Config(format!("STO label must be 0 or 1, got {label}")));
    }
    Ok(ce_with_grad(&act.sto_logits(), label as usize).0)
}

pub fn risi_loss(logits: &[f64; N_CATEGORIES], category: usize) -> Result<f64> {
    check_finite(logits, "RISI logits")?;
    if category >= N_CATEGORIES {
        return Err(NetError::Config(format!(
            "RISI category must be < {N_CATEGORIES}, got {category}"
        )));
    }
    Ok(ce_with_grad(logits, category).0)
}

/// `w_sto (sto1 + sto2) + w_risi ce(logits, category)` for one quad.
pub fn total_loss(
    act1: &ActivationVector,
    act2: &ActivationVector,
    logits: &[f64; N_CATEGORIES],
    label1: u8,
    label2: u8,
    category: usize,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let sto = sto_loss(act1, label1)? + sto_loss(act2, label2)?;
    let risi = risi_loss(logits, category)?;
    Ok(weighted(weights, sto, risi))
}

/// Skips a zero-weighted term outright so its value cannot leak through
/// `0 * inf`.
pub(crate) fn weighted(w: &LossWeights, sto: f64, risi: f64) -> f64 {
    let mut t = 0.0;
    if w.w_sto != 0.0 {
        t += w.w_sto * sto;
    }
    if w.w_risi != 0.0 {
        t += w.w_risi * risi;
    }
    t
}
