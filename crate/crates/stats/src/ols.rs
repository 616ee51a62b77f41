//! Least squares by Householder QR with a rank check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StatsError};

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub residual_sd: f64,
    /// `(X^T X)^{-1}` scaled by the residual variance.
    pub covariance: DMatrix<f64>,
}

/// Minimises `|y - X b|^2`. A column whose QR diagonal falls below `1e-10`
/// of its norm is reported as collinear by `names[k]`.
pub fn ols(x: &DMatrix<f64>, y: &[f64], names: &[&str]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(StatsError::Invalid(format!("{n} design rows but {} targets", y.len())));
    }
    if n <= p {
        return Err(StatsError::Invalid(format!("need more than {p} observations, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite design or target value".into()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for k in 0..p {
        let norm = x.column(k).norm();
        if norm == 0.0 || r[(k, k)].abs() <= 1e-10 * norm {
            let name = names.get(k).copied().unwrap_or("?");
            return Err(StatsError::Singular(format!(
                "column {name} is collinear with the preceding columns"
            )));
        }
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| StatsError::Singular("triangular solve failed".into()))?;
    let resid = DVector::from_column_slice(y) - x * &coef;
    let dof = (n - p) as f64;
    let s2 = resid.norm_squared() / dof;
    let rinv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| StatsError::Singular("R is not invertible".into()))?;
    let covariance = &rinv * rinv.transpose() * s2;
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        residual_sd: s2.sqrt(),
        covariance,
    })
}
