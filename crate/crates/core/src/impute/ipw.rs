use std::collections::BTreeMap;

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{block_a_design, mice_pmm_with, rubin_pool, sandwich_weighted_mean, ImputationRun, MiceConfig, PooledEstimate};
use crate::error::{Error, Result};
use crate::missing::{eligible, MaskedDataset};
use crate::stats::linalg::logistic_irls;
use crate::survey::Block;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpwConfig {
    pub exclude_threshold: f64,
    pub cap: f64,
    pub mice: MiceConfig,
}

impl Default for IpwConfig {
    fn default() -> Self {
        Self { exclude_threshold: 0.5, cap: 10.0, mice: MiceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwWeights {
    /// Capped weight per respondent; `None` for excluded respondents.
    pub weights: Vec<Option<f64>>,
    /// Estimated inclusion probability per respondent.
    pub propensity: Vec<f64>,
    pub cap: f64,
    /// Intercept first, then the Block A design columns. Empty when every
    /// respondent was included.
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

impl IpwWeights {
    pub fn max_weight(&self) -> f64 {
        self.weights.iter().flatten().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct IpwResult {
    pub run: ImputationRun,
    pub weights: IpwWeights,
    /// Pooled weighted mean per B/C field name.
    pub pooled: BTreeMap<String, PooledEstimate>,
}

/// Respondents with at least `threshold` of the eligible cells of Block B
/// or Block C deleted.
pub fn exclusion(masked: &MaskedDataset, threshold: f64) -> Vec<bool> {
    let ds = &masked.truth;
    (0..ds.len())
        .map(|r| {
            [Block::B, Block::C].iter().any(|&b| {
                let cells: Vec<usize> = ds.codebook.block_fields(b).into_iter().filter(|&f| eligible(ds, r, f)).collect();
                let del = cells.iter().filter(|&&f| masked.is_deleted(r, f)).count();
                !cells.is_empty() && del as f64 / cells.len() as f64 >= threshold
            })
        })
        .collect()
}

fn propensity(design: &[Vec<f64>], included: &[bool]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = design.len();
    if included.iter().all(|&i| i) {
        return Ok((vec![1.0; n], Vec::new(), 0.0));
    }
    if !included.iter().any(|&i| i) {
        return Err(Error::Fit("every respondent is excluded; no inclusion model".into()));
    }
    let p = design[0].len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { design[i][j - 1] });
    let y: Vec<f64> = included.iter().map(|&i| i as u8 as f64).collect();
    let fit = logistic_irls(&x, &y)?;
    let probs = design
        .iter()
        .map(|row| {
            let mut full = Vec::with_capacity(p);
            full.push(1.0);
            full.extend_from_slice(row);
            fit.predict(&full)
        })
        .collect();
    Ok((probs, fit.coef, fit.ridge))
}

/// Inverse-probability weighting with multiple imputation.
///
/// The inclusion model is a logistic regression on Block A. MICE runs over
/// every respondent with `1/p̂` as an extra covariate, so excluded rows are
/// also completed; only included rows enter the weighted estimates.
pub fn ipw_mi(masked: &MaskedDataset, config: &IpwConfig, seed: u64) -> Result<IpwResult> {
    if config.mice.m < 2 {
        return Err(Error::Config("IPW/MI needs M ≥ 2 imputations".into()));
    }
    let ds = &masked.observed;
    let excluded = exclusion(masked, config.exclude_threshold);
    let included: Vec<bool> = excluded.iter().map(|e| !e).collect();
    let design = block_a_design(ds);
    let (prop, coefficients, ridge) = propensity(&design, &included)?;
    info!("IPW/MI: {} of {} respondents included", included.iter().filter(|&&i| i).count(), ds.len());
    let inverse: Vec<f64> = prop.iter().map(|p| 1.0 / p.max(1e-12)).collect();
    let weights: Vec<Option<f64>> = inverse.iter().zip(&included).map(|(&w, &inc)| inc.then(|| w.min(config.cap))).collect();
    let mut run = mice_pmm_with(masked, &config.mice, seed, &[inverse])?;
    run.method = "ipwmi".into();
    run.config = serde_json::to_value(config).unwrap();

    let mut pooled = BTreeMap::new();
    for f in ds.codebook.target_fields() {
        let mut est = Vec::new();
        let mut var = Vec::new();
        for completed in &run.completed {
            let (vals, ws): (Vec<f64>, Vec<f64>) = (0..ds.len())
                .filter_map(|r| Some((completed.ordinal(r, f)? as f64, weights[r]?)))
                .unzip();
            if let Some((mu, v)) = sandwich_weighted_mean(&vals, &ws) {
                est.push(mu);
                var.push(v);
            }
        }
        if est.len() == run.m() {
            pooled.insert(ds.codebook.fields[f].name.clone(), rubin_pool(&est, &var)?);
        }
    }
    Ok(IpwResult { run, weights: IpwWeights { weights, propensity: prop, cap: config.cap, coefficients, ridge }, pooled })
}
