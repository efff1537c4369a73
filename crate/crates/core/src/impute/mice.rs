use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_run, Frame, ImputationRun, Kind};
use crate::error::Result;
use crate::missing::MaskedDataset;
use crate::rng::stream;
use crate::stats::linalg::ridge;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiceConfig {
    pub m: usize,
    pub iters: usize,
    pub donors: usize,
    /// Ridge added to the normal equations to keep bootstrap fits solvable.
    pub ridge: f64,
}

impl Default for MiceConfig {
    fn default() -> Self {
        Self { m: 5, iters: 10, donors: 5, ridge: 1e-6 }
    }
}

/// Indices into `pred_obs` of the `k` nearest predictions to `target`,
/// ties broken by index.
pub fn pmm_donors(pred_obs: &[f64], target: f64, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = pred_obs.iter().enumerate().map(|(i, p)| ((p - target).abs(), i)).collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.truncate(k);
    }
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().map(|(_, i)| i).collect()
}

fn to_matrix(rows: &[Vec<f64>], which: &[usize]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, |r| r.len()) + 1;
    DMatrix::from_fn(which.len(), p, |i, j| if j == 0 { 1.0 } else { rows[which[i]][j - 1] })
}

fn predict(rows: &[Vec<f64>], which: &[usize], beta: &DVector<f64>) -> Vec<f64> {
    which.iter().map(|&r| beta[0] + rows[r].iter().zip(beta.iter().skip(1)).map(|(x, b)| x * b).sum::<f64>()).collect()
}

fn chain(masked: &MaskedDataset, config: &MiceConfig, extra: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Frame> {
    let mut frame = Frame::new(masked);
    let order = frame.visit_order();
    let cb = &masked.truth.codebook;
    for &j in &order {
        let pool = frame.observed_values(j);
        for r in frame.rows_of(j, Kind::Del) {
            frame.y[r][j] = pool.choose(rng).copied().unwrap_or(3.0);
        }
    }
    let mut warned = vec![false; frame.fields.len()];
    for _ in 0..config.iters {
        for &j in &order {
            let obs = frame.rows_of(j, Kind::Obs);
            let del = frame.rows_of(j, Kind::Del);
            if obs.len() < config.donors {
                if !warned[j] {
                    warn!("{}: {} observed rows < {} donors; mean imputation", cb.fields[frame.fields[j]].name, obs.len(), config.donors);
                    warned[j] = true;
                }
                let fill = crate::stats::mean(&frame.observed_values(j)).map(f64::round).unwrap_or(3.0);
                for r in del {
                    frame.y[r][j] = fill;
                }
                continue;
            }
            let x = frame.predictors(j, extra);
            let y_obs: Vec<f64> = obs.iter().map(|&r| frame.y[r][j]).collect();
            let beta_hat = ridge(&to_matrix(&x, &obs), &DVector::from_vec(y_obs.clone()), config.ridge)?;
            let boot: Vec<usize> = (0..obs.len()).map(|_| obs[rng.random_range(0..obs.len())]).collect();
            let y_boot: Vec<f64> = boot.iter().map(|&r| frame.y[r][j]).collect();
            let beta_star = ridge(&to_matrix(&x, &boot), &DVector::from_vec(y_boot), config.ridge)?;
            let pred_obs = predict(&x, &obs, &beta_hat);
            let pred_del = predict(&x, &del, &beta_star);
            for (&r, &target) in del.iter().zip(&pred_del) {
                let donors = pmm_donors(&pred_obs, target, config.donors);
                let pick = donors[rng.random_range(0..donors.len())];
                frame.y[r][j] = y_obs[pick];
            }
        }
    }
    Ok(frame)
}

pub fn mice_pmm(masked: &MaskedDataset, config: &MiceConfig, seed: u64) -> Result<ImputationRun> {
    mice_pmm_with(masked, config, seed, &[])
}

/// MICE with additional per-respondent covariates appended to every model.
pub fn mice_pmm_with(masked: &MaskedDataset, config: &MiceConfig, seed: u64, extra: &[Vec<f64>]) -> Result<ImputationRun> {
    let frames: Vec<Frame> = (0..config.m)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &[b"mice", &(k as u64).to_le_bytes()]);
            chain(masked, config, extra, &mut rng)
        })
        .collect::<Result<_>>()?;
    let completed = frames.iter().map(|f| f.complete(masked)).collect();
    Ok(make_run("mice", seed, serde_json::to_value(config).unwrap(), masked, completed))
}
