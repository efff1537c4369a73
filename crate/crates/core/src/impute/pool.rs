use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub q_bar: f64,
    pub w_bar: f64,
    pub b: f64,
    pub t: f64,
    /// `None` when B = 0 (degrees of freedom unbounded).
    pub df: Option<f64>,
    pub m: usize,
    /// Between-imputation variance is zero.
    pub b_zero: bool,
}

/// Rubin's rules over M ≥ 2 point estimates and their variances.
pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(Error::Config(format!("rubin_pool needs M ≥ 2 matching estimates and variances (got {m}, {})", variances.len())));
    }
    let mf = m as f64;
    let q_bar = estimates.iter().sum::<f64>() / mf;
    let w_bar = variances.iter().sum::<f64>() / mf;
    let b = estimates.iter().map(|q| (q - q_bar).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * b;
    let t = w_bar + inflated;
    let b_zero = b == 0.0;
    let df = (!b_zero).then(|| (mf - 1.0) * (1.0 + w_bar / inflated).powi(2));
    Ok(PooledEstimate { q_bar, w_bar, b, t, df, m, b_zero })
}

/// Weighted mean with its sandwich variance `Σw²(y−μ)² / (Σw)²`.
pub fn sandwich_weighted_mean(values: &[f64], weights: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = weights.iter().sum();
    if values.is_empty() || sw <= 0.0 {
        return None;
    }
    let mu = values.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / sw;
    let var = values.iter().zip(weights).map(|(y, w)| w * w * (y - mu).powi(2)).sum::<f64>() / (sw * sw);
    Some((mu, var))
}
