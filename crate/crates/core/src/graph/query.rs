use serde::{Deserialize, Serialize};

use super::CooccurrenceGraph;
use crate::error::{Error, Result};
use crate::survey::{Code, Dataset};

/// Per-source evidence row behind a conditional: joint counts from
/// `field = level` to every level of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEvidence {
    pub field: String,
    pub level: String,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDistribution {
    pub target: String,
    pub probabilities: Vec<f64>,
    pub support_n: u64,
    /// Evidence rows actually combined, in codebook order of their fields.
    pub sources: Vec<SourceEvidence>,
    /// Evidence fields that are not permitted sources of the target.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignored: Vec<String>,
    /// `Some("marginal")` when no usable evidence existed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl ConditionalDistribution {
    /// `Σ ordinal · p` with ordinals `1..=K`.
    pub fn expectation(&self) -> f64 {
        self.probabilities.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }
}

/// Laplace-smoothed distribution from counts.
pub fn smoothed(counts: &[u64], alpha: f64) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let denom = total as f64 + alpha * counts.len() as f64;
    counts.iter().map(|&c| (c as f64 + alpha) / denom).collect()
}

/// Arithmetic mean of per-source distributions, accumulated in order.
pub fn mixture(parts: &[Vec<f64>]) -> Vec<f64> {
    let k = parts[0].len();
    let mut out = vec![0.0; k];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let m = parts.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

fn proportions(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

impl CooccurrenceGraph {
    /// Empirical level proportions of a field (skip-logic absences excluded).
    pub fn marginal(&self, field: usize) -> Result<ConditionalDistribution> {
        let counts = self.node_counts(field);
        let total: u64 = counts.iter().sum();
        let name = self.codebook().fields[field].name.clone();
        if total == 0 {
            return Err(Error::NeverObserved(name));
        }
        Ok(ConditionalDistribution {
            target: name,
            probabilities: proportions(counts),
            support_n: total,
            sources: Vec::new(),
            ignored: Vec::new(),
            fallback: None,
        })
    }

    /// Mixture of Laplace-smoothed per-source conditionals over every
    /// permitted evidence field; the marginal when none is usable.
    pub fn conditional(&self, target: usize, evidence: &[(usize, Code)]) -> Result<ConditionalDistribution> {
        let cb = self.codebook();
        let mut ev: Vec<(usize, Code)> = evidence.to_vec();
        ev.sort();
        ev.dedup_by_key(|e| e.0);
        let mut sources = Vec::new();
        let mut parts = Vec::new();
        let mut ignored = Vec::new();
        let mut support = u64::MAX;
        for (field, code) in ev {
            match self.edge_row(field, code, target) {
                Some(row) => {
                    support = support.min(row.iter().sum());
                    parts.push(smoothed(row, self.alpha));
                    sources.push(SourceEvidence {
                        field: cb.fields[field].name.clone(),
                        level: cb.fields[field].label(code).to_string(),
                        counts: row.to_vec(),
                    });
                }
                None => ignored.push(cb.fields[field].name.clone()),
            }
        }
        if parts.is_empty() {
            let mut m = self.marginal(target)?;
            m.ignored = ignored;
            m.fallback = Some("marginal".into());
            return Ok(m);
        }
        Ok(ConditionalDistribution {
            target: cb.fields[target].name.clone(),
            probabilities: mixture(&parts),
            support_n: support,
            sources,
            ignored,
            fallback: None,
        })
    }

    /// Joint counts for a permitted pair, as a crosstab with the source
    /// field as rows. `None` when the pair is not permitted.
    pub fn pair_crosstab(&self, source: usize, target: usize) -> Option<Crosstab> {
        if !self.is_permitted(source, target) {
            return None;
        }
        let cb = self.codebook();
        let rows = cb.fields[source].level_count();
        let counts = (0..rows).map(|a| self.edge_row(source, a as Code, target).unwrap().to_vec()).collect();
        Some(Crosstab::from_counts(&cb.fields[source].name, &cb.fields[target].name, row_labels(cb, source), row_labels(cb, target), counts))
    }
}

fn row_labels(cb: &crate::survey::Codebook, f: usize) -> Vec<String> {
    cb.fields[f].levels.iter().map(|l| l.label.clone()).collect()
}

/// Level proportions of a field straight from respondents.
pub fn dataset_marginal(train: &Dataset, field: usize) -> Result<ConditionalDistribution> {
    let spec = &train.codebook.fields[field];
    let mut counts = vec![0u64; spec.level_count()];
    for r in &train.respondents {
        if let Some(c) = r.answers[field] {
            counts[c as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::NeverObserved(spec.name.clone()));
    }
    Ok(ConditionalDistribution {
        target: spec.name.clone(),
        probabilities: proportions(&counts),
        support_n: total,
        sources: Vec::new(),
        ignored: Vec::new(),
        fallback: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crosstab {
    pub row_field: String,
    pub col_field: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub row_totals: Vec<u64>,
    /// Percent of each row falling in each column; `None` for empty rows.
    pub row_percents: Vec<Vec<Option<f64>>>,
    pub n: u64,
}

impl Crosstab {
    pub fn from_counts(
        row_field: &str,
        col_field: &str,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        counts: Vec<Vec<u64>>,
    ) -> Self {
        let row_totals: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let row_percents = counts
            .iter()
            .zip(&row_totals)
            .map(|(r, &t)| r.iter().map(|&c| (t > 0).then(|| 100.0 * c as f64 / t as f64)).collect())
            .collect();
        let n = row_totals.iter().sum();
        Crosstab { row_field: row_field.into(), col_field: col_field.into(), row_labels, col_labels, counts, row_totals, row_percents, n }
    }
}

/// Joint counts of two fields over respondents observed on both.
pub fn crosstab(train: &Dataset, a: usize, b: usize) -> Crosstab {
    let cb = &train.codebook;
    let (la, lb) = (cb.fields[a].level_count(), cb.fields[b].level_count());
    let mut counts = vec![vec![0u64; lb]; la];
    for r in &train.respondents {
        if let (Some(x), Some(y)) = (r.answers[a], r.answers[b]) {
            counts[x as usize][y as usize] += 1;
        }
    }
    Crosstab::from_counts(&cb.fields[a].name, &cb.fields[b].name, row_labels(cb, a), row_labels(cb, b), counts)
}
