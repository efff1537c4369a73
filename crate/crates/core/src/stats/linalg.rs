//! Least squares and logistic regression.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.cholesky().map(|c| c.solve(b))
}

/// Ridge-penalised normal equations `(XᵀX + λI)β = Xᵀy`.
pub fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let p = x.ncols();
    let xtx = x.transpose() * x + DMatrix::identity(p, p) * lambda;
    let xty = x.transpose() * y;
    solve_spd(xtx, &xty).ok_or_else(|| Error::Fit("normal equations are singular".into()))
}

/// Ordinary least squares; a singular design falls back to ridge λ=1e-8.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let full_rank = xtx.clone().svd(false, false).singular_values.iter().all(|s| *s > 1e-10 * (1.0 + xtx.norm()));
    if full_rank {
        if let Some(b) = solve_spd(xtx.clone(), &xty) {
            return Ok(b);
        }
    }
    warn!("singular OLS design; using ridge 1e-8");
    solve_spd(xtx + DMatrix::identity(p, p) * 1e-8, &xty)
        .ok_or_else(|| Error::Fit("design singular even with ridge".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Ridge penalty actually used (0 unless separation forced a fallback).
    pub ridge: f64,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(row.iter().zip(&self.coef).map(|(x, b)| x * b).sum())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_lik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, lambda: f64) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for (e, &yi) in eta.iter().zip(y) {
        // log(1 + e^η) computed stably
        let soft = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += yi * e - soft;
    }
    ll - 0.5 * lambda * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;
const SEPARATION_COEF: f64 = 25.0;
pub const SEPARATION_RIDGE: f64 = 1e-4;

fn irls(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let mut ll = log_lik(x, y, &beta, lambda);
    let mut penalty = DMatrix::identity(p, p) * lambda;
    penalty[(0, 0)] = 0.0;
    for it in 1..=MAX_ITER {
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(1e-12)).collect();
        let mut xtwx = penalty.clone();
        let mut grad = DVector::zeros(p);
        for i in 0..n {
            let row = x.row(i);
            for a in 0..p {
                grad[a] += row[a] * (y[i] - mu[i]);
                for b in 0..p {
                    xtwx[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        for a in 1..p {
            grad[a] -= lambda * beta[a];
        }
        let step = solve_spd(xtwx, &grad).ok_or_else(|| Error::Fit("information matrix singular".into()))?;
        let mut scale = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = log_lik(x, y, &next, lambda);
        while next_ll < ll - 1e-12 && scale > 1e-6 {
            scale /= 2.0;
            next = &beta + &step * scale;
            next_ll = log_lik(x, y, &next, lambda);
        }
        let change = (next_ll - ll).abs();
        beta = next;
        ll = next_ll;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Fit("coefficients diverged".into()));
        }
        if lambda == 0.0 && beta.iter().skip(1).any(|b| b.abs() > SEPARATION_COEF) {
            return Err(Error::Fit("separation".into()));
        }
        if change < TOL {
            return Ok(LogisticFit { coef: beta.iter().copied().collect(), iterations: it, log_likelihood: ll, ridge: lambda });
        }
    }
    Err(Error::Fit(format!(
        "IRLS did not converge in {MAX_ITER} iterations (log-likelihood {ll:.6}, coefficients {:?})",
        beta.iter().map(|b| (b * 1e4).round() / 1e4).collect::<Vec<_>>()
    )))
}

/// Logistic regression by IRLS. `x` must include an intercept column first.
/// Separation or a singular information matrix triggers a ridge refit.
pub fn logistic_irls(x: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit> {
    match irls(x, y, 0.0) {
        Ok(fit) => Ok(fit),
        Err(Error::Fit(reason)) if reason == "separation" || reason.contains("singular") || reason.contains("diverged") => {
            warn!("logistic fit: {reason}; refitting with ridge {SEPARATION_RIDGE}");
            irls(x, y, SEPARATION_RIDGE)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let b = ols(&x, &y).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-10 && (b[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn ols_singular_uses_ridge() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = ols(&x, &y).unwrap();
        assert!((b[0] + b[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn logistic_matches_known_fit() {
        // Overlapping classes; compare against the score equations.
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let y = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut m = DMatrix::zeros(8, 2);
        for (i, v) in xs.iter().enumerate() {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = *v;
        }
        let fit = logistic_irls(&m, &y).unwrap();
        assert_eq!(fit.ridge, 0.0);
        let (mut g0, mut g1) = (0.0, 0.0);
        for i in 0..8 {
            let r = y[i] - fit.predict(&[1.0, xs[i]]);
            g0 += r;
            g1 += r * xs[i];
        }
        assert!(g0.abs() < 1e-6 && g1.abs() < 1e-6);
    }

    #[test]
    fn separation_falls_back_to_ridge() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut m = DMatrix::zeros(6, 2);
        for (i, v) in xs.iter().enumerate() {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = *v;
        }
        let fit = logistic_irls(&m, &y).unwrap();
        assert_eq!(fit.ridge, SEPARATION_RIDGE);
        assert!(fit.predict(&[1.0, 0.0]) < 0.05 && fit.predict(&[1.0, 5.0]) > 0.95);
    }
}
