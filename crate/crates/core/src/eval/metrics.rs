//! Scalar metrics over paired predictions and truths.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::impute::{block_a_design, PooledEstimate};
use crate::stats::linalg::ols;
use crate::survey::Dataset;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Undefined("empty cell selection".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Config(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Mean of `pred − truth`.
pub fn signed_bias(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| p - t).sum::<f64>() / pred.len() as f64)
}

/// Share of cells with `|pred − truth| ≤ 1`.
pub fn within1(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(p, t)| (*p - *t).abs() <= 1.0 + 1e-12).count() as f64 / pred.len() as f64)
}

/// Quadratic-weighted Cohen's κ on ordinals `1..=levels`. `None` when the
/// expected disagreement is zero.
pub fn quadratic_weighted_kappa(pred: &[u8], truth: &[u8], levels: usize) -> Result<Option<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Config("kappa needs equal, non-empty vectors".into()));
    }
    if levels < 2 {
        return Err(Error::Config("kappa needs at least two levels".into()));
    }
    let mut obs = vec![vec![0.0; levels]; levels];
    for (&p, &t) in pred.iter().zip(truth) {
        if p < 1 || t < 1 || p as usize > levels || t as usize > levels {
            return Err(Error::OrdinalOutOfRange { row: 0, field: "kappa".into(), value: p.max(t) as i64, max: levels });
        }
        obs[t as usize - 1][p as usize - 1] += 1.0;
    }
    let n = pred.len() as f64;
    let rows: Vec<f64> = obs.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..levels).map(|j| obs.iter().map(|r| r[j]).sum()).collect();
    let denom = ((levels - 1) * (levels - 1)) as f64;
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let w = ((i as f64) - (j as f64)).powi(2) / denom;
            wo += w * obs[i][j];
            we += w * rows[i] * cols[j] / n;
        }
    }
    Ok((we > 0.0).then(|| 1.0 - wo / we))
}

/// Level proportions of ordinals `1..=levels`.
pub fn ordinal_distribution(values: &[u8], levels: usize) -> Vec<f64> {
    let mut c = vec![0.0; levels];
    for &v in values {
        if v >= 1 && (v as usize) <= levels {
            c[v as usize - 1] += 1.0;
        }
    }
    let n: f64 = c.iter().sum();
    if n > 0.0 {
        c.iter_mut().for_each(|x| *x /= n);
    }
    c
}

/// `KL(p‖q) + KL(q‖p)` after adding `eps` to every level and renormalizing.
pub fn symmetric_kl(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Config("distributions must share levels".into()));
    }
    let smooth = |d: &[f64]| {
        let s: f64 = d.iter().map(|x| x + eps).sum();
        d.iter().map(|x| (x + eps) / s).collect::<Vec<f64>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln() + b * (b / a).ln()).sum())
}

/// Outcome and covariates for the coefficient-drift metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsSpec {
    pub outcome: String,
}

impl Default for OlsSpec {
    fn default() -> Self {
        Self { outcome: "Prep_Start".into() }
    }
}

fn ols_coefficients(ds: &Dataset, rows: &[usize], outcome: usize) -> Result<DVector<f64>> {
    let design = block_a_design(ds);
    let used: Vec<usize> = rows.iter().copied().filter(|&r| ds.ordinal(r, outcome).is_some()).collect();
    if used.is_empty() {
        return Err(Error::Undefined("no rows with the outcome observed".into()));
    }
    let p = design[0].len() + 1;
    let x = DMatrix::from_fn(used.len(), p, |i, j| if j == 0 { 1.0 } else { design[used[i]][j - 1] });
    let y = DVector::from_iterator(used.len(), used.iter().map(|&r| ds.ordinal(r, outcome).unwrap() as f64));
    ols(&x, &y)
}

/// `‖β_imputed − β_truth‖₂` for an OLS of the outcome on the Block A
/// design over `rows`. Several imputed copies are averaged coefficient-wise.
pub fn ols_coef_delta(imputed: &[Dataset], truth: &Dataset, rows: &[usize], spec: &OlsSpec) -> Result<f64> {
    if imputed.is_empty() {
        return Err(Error::Config("no imputed datasets".into()));
    }
    let outcome = truth.codebook.require(&spec.outcome)?;
    let bt = ols_coefficients(truth, rows, outcome)?;
    let mut avg = DVector::zeros(bt.len());
    for d in imputed {
        avg += ols_coefficients(d, rows, outcome)?;
    }
    avg /= imputed.len() as f64;
    Ok((avg - bt).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: Option<f64>,
    pub covered: usize,
    pub fields: usize,
    /// Fields dropped because B = 0.
    pub excluded_b_zero: usize,
    pub reason: Option<String>,
}

/// Share of fields whose Rubin 95% interval (t with MI df) contains the
/// true mean. Intervals are closed.
pub fn ci_coverage(pooled: &BTreeMap<String, PooledEstimate>, truth_means: &BTreeMap<String, f64>) -> Coverage {
    let mut covered = 0;
    let mut fields = 0;
    let mut excluded = 0;
    for (name, est) in pooled {
        let Some(&truth) = truth_means.get(name) else { continue };
        if est.m < 2 {
            return Coverage { fraction: None, covered: 0, fields: 0, excluded_b_zero: 0, reason: Some("coverage undefined for M=1".into()) };
        }
        let Some(df) = est.df else {
            excluded += 1;
            continue;
        };
        let q = match StudentsT::new(0.0, 1.0, df) {
            Ok(t) => t.inverse_cdf(0.975),
            Err(e) => {
                warn!("{name}: t quantile unavailable ({e}); field skipped");
                excluded += 1;
                continue;
            }
        };
        let half = q * est.t.sqrt();
        fields += 1;
        if (est.q_bar - truth).abs() <= half {
            covered += 1;
        }
    }
    let fraction = (fields > 0).then(|| covered as f64 / fields as f64);
    let reason = (fields == 0).then(|| "no field with a defined interval".to_string());
    Coverage { fraction, covered, fields, excluded_b_zero: excluded, reason }
}
