//! Classical imputation baselines: column mean, MICE with predictive mean
//! matching, a missForest-style iterative forest imputer, and IPW with
//! multiple imputation. Rubin pooling and sandwich variance live in `pool`.

mod forest;
mod ipw;
mod mice;
mod pool;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missing::MaskedDataset;
use crate::survey::{Block, Code, Dataset, FieldKind};

pub use forest::{missforest, ForestConfig, RandomForest, RegressionTree, TreeParams};
pub use ipw::{exclusion, ipw_mi, IpwConfig, IpwResult, IpwWeights};
pub use mice::{mice_pmm, mice_pmm_with, pmm_donors, MiceConfig};
pub use pool::{rubin_pool, sandwich_weighted_mean, PooledEstimate};

/// Where a cell's value in a completed dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellOrigin {
    Observed,
    Imputed,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct ImputationRun {
    pub method: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// M completed datasets (one for single-imputation methods).
    pub completed: Vec<Dataset>,
    /// Copy of the deletion mask, `deleted[row][field]`.
    pub deleted: Vec<Vec<bool>>,
}

impl ImputationRun {
    pub fn m(&self) -> usize {
        self.completed.len()
    }

    pub fn origin(&self, row: usize, field: usize) -> CellOrigin {
        if self.deleted[row][field] {
            CellOrigin::Imputed
        } else if self.completed[0].respondents[row].answers[field].is_none() {
            CellOrigin::Skipped
        } else {
            CellOrigin::Observed
        }
    }

    /// Imputed ordinals of copy `k` as `(row, field, ordinal)`.
    pub fn imputed_ordinals(&self, k: usize) -> Vec<(usize, usize, Option<u8>)> {
        let ds = &self.completed[k];
        let mut out = Vec::new();
        for (r, row) in self.deleted.iter().enumerate() {
            for (f, &d) in row.iter().enumerate() {
                if d {
                    out.push((r, f, ds.ordinal(r, f)));
                }
            }
        }
        out
    }

    /// Mean imputed ordinal across the M copies.
    pub fn point_value(&self, row: usize, field: usize) -> Option<f64> {
        let vals: Vec<f64> = self.completed.iter().filter_map(|d| d.ordinal(row, field)).map(f64::from).collect();
        crate::stats::mean(&vals)
    }

    /// Imputed cells that are empty or fall outside the field's ordinal range.
    pub fn out_of_range(&self) -> usize {
        let cb = &self.completed[0].codebook;
        (0..self.m())
            .flat_map(|k| self.imputed_ordinals(k))
            .filter(|&(_, f, v)| {
                let max = cb.fields[f].levels.iter().filter_map(|l| l.ordinal).max().unwrap_or(0);
                !matches!(v, Some(x) if x >= 1 && x <= max)
            })
            .count()
    }

    /// Undeleted cells of every copy equal the masked input.
    pub fn preserves_observed(&self, masked: &MaskedDataset) -> bool {
        self.completed.iter().all(|ds| {
            ds.respondents.iter().zip(&masked.observed.respondents).enumerate().all(|(r, (a, b))| {
                a.id == b.id && (0..a.answers.len()).all(|f| self.deleted[r][f] || a.answers[f] == b.answers[f])
            })
        })
    }

    pub fn write_csv<W: Write>(&self, k: usize, writer: W) -> Result<()> {
        self.completed.get(k).ok_or_else(|| Error::Config(format!("no completed copy {k}")))?.write_csv(writer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Obs,
    Del,
    Skip,
}

/// Numeric working copy of the Block B/C columns plus a fixed Block A design.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub fields: Vec<usize>,
    pub design_a: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub kind: Vec<Vec<Kind>>,
}

/// Block A covariates: ordinal fields as their ordinal, categorical fields
/// one-hot with the first level dropped. Missing entries use the column
/// mean (ordinal) or all-zero indicators (categorical).
pub fn block_a_design(ds: &Dataset) -> Vec<Vec<f64>> {
    let cb = &ds.codebook;
    let mut out = vec![Vec::new(); ds.len()];
    for f in cb.block_fields(Block::A) {
        let spec = &cb.fields[f];
        match spec.kind {
            FieldKind::Ordinal => {
                let vals: Vec<f64> = (0..ds.len()).filter_map(|r| ds.ordinal(r, f)).map(f64::from).collect();
                let fill = crate::stats::mean(&vals).unwrap_or(0.0);
                for (r, row) in out.iter_mut().enumerate() {
                    row.push(ds.ordinal(r, f).map(f64::from).unwrap_or(fill));
                }
            }
            FieldKind::Categorical => {
                for level in 1..spec.level_count() {
                    for (r, row) in out.iter_mut().enumerate() {
                        row.push((ds.respondents[r].answers[f] == Some(level as Code)) as u8 as f64);
                    }
                }
            }
        }
    }
    out
}

impl Frame {
    pub fn new(masked: &MaskedDataset) -> Self {
        let ds = &masked.observed;
        let cb = &ds.codebook;
        let fields: Vec<usize> = cb.fields.iter().enumerate().filter(|(_, f)| f.block != Block::A).map(|(i, _)| i).collect();
        let mut y = vec![vec![0.0; fields.len()]; ds.len()];
        let mut kind = vec![vec![Kind::Skip; fields.len()]; ds.len()];
        for r in 0..ds.len() {
            for (j, &f) in fields.iter().enumerate() {
                if masked.is_deleted(r, f) {
                    kind[r][j] = Kind::Del;
                } else if let Some(v) = ds.ordinal(r, f) {
                    kind[r][j] = Kind::Obs;
                    y[r][j] = v as f64;
                }
            }
        }
        Frame { fields, design_a: block_a_design(ds), y, kind }
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn rows_of(&self, j: usize, k: Kind) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.kind[r][j] == k).collect()
    }

    pub fn observed_values(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).filter(|&r| self.kind[r][j] == Kind::Obs).map(|r| self.y[r][j]).collect()
    }

    /// Columns with at least one deletion, fewest deletions first, ties in
    /// codebook order.
    pub fn visit_order(&self) -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> =
            (0..self.fields.len()).map(|j| (self.rows_of(j, Kind::Del).len(), j)).filter(|&(d, _)| d > 0).collect();
        cols.sort();
        cols.into_iter().map(|(_, j)| j).collect()
    }

    /// Predictor row for column `target`: Block A design, the other B/C
    /// columns (skip cells at their column mean), then `extra`.
    pub fn predictors(&self, target: usize, extra: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let means: Vec<f64> = (0..self.fields.len())
            .map(|j| {
                let v: Vec<f64> = (0..self.rows()).filter(|&r| self.kind[r][j] != Kind::Skip).map(|r| self.y[r][j]).collect();
                crate::stats::mean(&v).unwrap_or(3.0)
            })
            .collect();
        (0..self.rows())
            .map(|r| {
                let mut row = self.design_a[r].clone();
                for j in 0..self.fields.len() {
                    if j != target {
                        row.push(if self.kind[r][j] == Kind::Skip { means[j] } else { self.y[r][j] });
                    }
                }
                for e in extra {
                    row.push(e[r]);
                }
                row
            })
            .collect()
    }

    /// Write imputed values back as codes, rounding and clamping to the
    /// field's ordinal range.
    pub fn complete(&self, masked: &MaskedDataset) -> Dataset {
        let mut ds = masked.observed.clone();
        let cb = ds.codebook.clone();
        for r in 0..self.rows() {
            for (j, &f) in self.fields.iter().enumerate() {
                if self.kind[r][j] == Kind::Del {
                    ds.respondents[r].answers[f] = Some(ordinal_to_code(&cb.fields[f], self.y[r][j]));
                }
            }
        }
        ds
    }
}

pub(crate) fn ordinal_to_code(spec: &crate::survey::FieldSpec, value: f64) -> Code {
    let ords: Vec<u8> = spec.levels.iter().filter_map(|l| l.ordinal).collect();
    let (lo, hi) = (*ords.iter().min().unwrap_or(&1), *ords.iter().max().unwrap_or(&1));
    let v = value.round().clamp(lo as f64, hi as f64) as u8;
    spec.levels.iter().position(|l| l.ordinal == Some(v)).unwrap_or(0) as Code
}

pub(crate) fn make_run(method: &str, seed: u64, config: serde_json::Value, masked: &MaskedDataset, completed: Vec<Dataset>) -> ImputationRun {
    ImputationRun { method: method.into(), seed, config, completed, deleted: masked.mask.cells.clone() }
}

/// Rounded observed column mean into every deleted cell; 3 for a column
/// with nothing observed.
pub fn mean_impute(masked: &MaskedDataset) -> ImputationRun {
    let mut frame = Frame::new(masked);
    for j in 0..frame.fields.len() {
        let fill = crate::stats::mean(&frame.observed_values(j)).map(f64::round).unwrap_or(3.0);
        for r in frame.rows_of(j, Kind::Del) {
            frame.y[r][j] = fill;
        }
    }
    let ds = frame.complete(masked);
    make_run("mean", 0, serde_json::json!({}), masked, vec![ds])
}

#[cfg(test)]
mod tests;
