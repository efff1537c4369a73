//! Cell selections and per-(method, scenario, block) metric reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{
    ci_coverage, mae, ols_coef_delta, ordinal_distribution, quadratic_weighted_kappa, rmse, signed_bias, symmetric_kl,
    within1, Coverage, OlsSpec,
};
use crate::error::{Error, Result};
use crate::impute::{rubin_pool, sandwich_weighted_mean, PooledEstimate};
use crate::llm::Embedder;
use crate::missing::MaskedDataset;
use crate::stats::{mean, sample_variance};
use crate::survey::{Block, Dataset};

pub const KL_EPS: f64 = 1e-6;

/// Cells to score, as `(row, field)` pairs. Skip-logic cells never appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSelection {
    pub cells: Vec<(usize, usize)>,
    pub descriptor: String,
}

impl CellSelection {
    /// Deleted cells of `block` within `rows`.
    pub fn deleted(masked: &MaskedDataset, rows: &[usize], block: Option<Block>) -> Self {
        let cb = &masked.truth.codebook;
        let cells = rows
            .iter()
            .flat_map(|&r| cb.target_fields().into_iter().map(move |f| (r, f)))
            .filter(|&(_, f)| block.is_none_or(|b| cb.fields[f].block == b))
            .filter(|&(r, f)| masked.is_deleted(r, f) && masked.truth.ordinal(r, f).is_some())
            .collect();
        Self { cells, descriptor: format!("deleted {} cells, ordinal-mappable", block_label(block)) }
    }

    /// Every answered Block B/C cell of `rows`, optionally one block.
    pub fn targets(truth: &Dataset, rows: &[usize], block: Option<Block>) -> Self {
        let cb = &truth.codebook;
        let cells = rows
            .iter()
            .flat_map(|&r| cb.target_fields().into_iter().map(move |f| (r, f)))
            .filter(|&(_, f)| block.is_none_or(|b| cb.fields[f].block == b))
            .filter(|&(r, f)| truth.ordinal(r, f).is_some())
            .collect();
        Self { cells, descriptor: format!("all {} cells, ordinal-mappable", block_label(block)) }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn filter_rows(&self, keep: impl Fn(usize) -> bool, tag: &str) -> Self {
        Self {
            cells: self.cells.iter().copied().filter(|&(r, _)| keep(r)).collect(),
            descriptor: format!("{} ({tag})", self.descriptor),
        }
    }
}

pub fn block_label(block: Option<Block>) -> &'static str {
    match block {
        Some(Block::A) => "Block A",
        Some(Block::B) => "Block B",
        Some(Block::C) => "Block C",
        None => "Combined",
    }
}

/// Metrics over one stratum of cells. RMSE, MAE and signed bias score the
/// pooled cell estimate (mean over completed copies); the agreement and
/// distribution metrics are computed per copy and averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub n_cells: usize,
    pub n_respondents: usize,
    pub rmse: Option<f64>,
    pub signed_bias: Option<f64>,
    pub mae: Option<f64>,
    pub within1: Option<f64>,
    pub exact: Option<f64>,
    pub qwk: Option<f64>,
    pub sym_kl: Option<f64>,
    pub reason: Option<String>,
}

impl StratumMetrics {
    fn empty(reason: &str) -> Self {
        Self {
            n_cells: 0,
            n_respondents: 0,
            rmse: None,
            signed_bias: None,
            mae: None,
            within1: None,
            exact: None,
            qwk: None,
            sym_kl: None,
            reason: Some(reason.into()),
        }
    }
}

/// Metrics of `completed` copies against `truth` on `sel`.
pub fn stratum_metrics(completed: &[Dataset], truth: &Dataset, sel: &CellSelection) -> Result<StratumMetrics> {
    if sel.is_empty() {
        return Ok(StratumMetrics::empty("empty stratum"));
    }
    if completed.is_empty() {
        return Err(Error::Config("no completed datasets".into()));
    }
    let t_ord: Vec<u8> = sel.cells.iter().map(|&(r, f)| truth.ordinal(r, f).expect("selection excludes skips")).collect();
    let t: Vec<f64> = t_ord.iter().map(|&x| x as f64).collect();
    let levels = sel.cells.iter().map(|&(_, f)| truth.codebook.fields[f].level_count()).max().unwrap_or(5);
    let mut acc = [0.0f64; 3];
    let mut pooled = vec![0.0f64; t.len()];
    let mut qwk = Vec::new();
    for ds in completed {
        let p_ord: Vec<u8> = sel
            .cells
            .iter()
            .map(|&(r, f)| {
                ds.ordinal(r, f).ok_or_else(|| Error::Undefined(format!("no prediction for row {r}, field {}", ds.codebook.fields[f].name)))
            })
            .collect::<Result<_>>()?;
        let p: Vec<f64> = p_ord.iter().map(|&x| x as f64).collect();
        pooled.iter_mut().zip(&p).for_each(|(s, x)| *s += x);
        acc[0] += within1(&p, &t)?;
        acc[1] += p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
        acc[2] += symmetric_kl(&ordinal_distribution(&p_ord, levels), &ordinal_distribution(&t_ord, levels), KL_EPS)?;
        qwk.push(quadratic_weighted_kappa(&p_ord, &t_ord, levels)?);
    }
    let m = completed.len() as f64;
    pooled.iter_mut().for_each(|s| *s /= m);
    let qwk = if qwk.iter().all(Option::is_some) { Some(qwk.iter().flatten().sum::<f64>() / m) } else { None };
    let mut rows: Vec<usize> = sel.cells.iter().map(|&(r, _)| r).collect();
    rows.sort_unstable();
    rows.dedup();
    Ok(StratumMetrics {
        n_cells: sel.len(),
        n_respondents: rows.len(),
        rmse: Some(rmse(&pooled, &t)?),
        signed_bias: Some(signed_bias(&pooled, &t)?),
        mae: Some(mae(&pooled, &t)?),
        within1: Some(acc[0] / m),
        exact: Some(acc[1] / m),
        qwk,
        sym_kl: Some(acc[2] / m),
        reason: match (qwk, rows.len()) {
            (None, _) => Some("kappa undefined (no expected disagreement)".into()),
            (_, 1) => Some("single respondent".into()),
            _ => None,
        },
    })
}

/// Compound and non-compound strata of a selection.
pub fn subgroup_stratify(
    completed: &[Dataset],
    truth: &Dataset,
    sel: &CellSelection,
) -> Result<(StratumMetrics, StratumMetrics)> {
    let compound = |r: usize| truth.respondents[r].flags.compound;
    Ok((
        stratum_metrics(completed, truth, &sel.filter_rows(compound, "compound"))?,
        stratum_metrics(completed, truth, &sel.filter_rows(|r| !compound(r), "non-compound"))?,
    ))
}

/// Cell-weighted mean of stratum values, `Σ nᵢ·xᵢ / Σ nᵢ`.
pub fn weighted_aggregate(strata: &[(f64, usize)]) -> Option<f64> {
    let n: usize = strata.iter().map(|s| s.1).sum();
    (n > 0).then(|| strata.iter().map(|(x, k)| x * *k as f64).sum::<f64>() / n as f64)
}

/// Pooled mean of each field over `rows`, one estimate per completed copy.
/// With weights, each copy uses the weighted mean with its sandwich
/// variance over weighted rows; otherwise the plain mean with `s²/n`.
/// Returns the estimate and the number of imputed cells that entered it.
pub fn pooled_field_means(
    completed: &[Dataset],
    deleted: &[Vec<bool>],
    fields: &[usize],
    rows: &[usize],
    weights: Option<&[Option<f64>]>,
) -> BTreeMap<String, (PooledEstimate, usize)> {
    let mut out = BTreeMap::new();
    if completed.len() < 2 {
        return out;
    }
    let cb = &completed[0].codebook;
    for &f in fields {
        let used: Vec<usize> = rows.iter().copied().filter(|&r| weights.is_none_or(|w| w[r].is_some())).collect();
        let mut est = Vec::new();
        let mut var = Vec::new();
        for ds in completed {
            let vals: Vec<(f64, f64)> = used
                .iter()
                .filter_map(|&r| ds.ordinal(r, f).map(|o| (o as f64, weights.map_or(1.0, |w| w[r].unwrap()))))
                .collect();
            let pair = match weights {
                Some(_) => {
                    let (v, w): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
                    sandwich_weighted_mean(&v, &w)
                }
                None => {
                    let v: Vec<f64> = vals.into_iter().map(|x| x.0).collect();
                    mean(&v).zip(sample_variance(&v)).map(|(m, s2)| (m, s2 / v.len() as f64))
                }
            };
            if let Some((m, v)) = pair {
                est.push(m);
                var.push(v);
            }
        }
        if est.len() != completed.len() {
            continue;
        }
        let imputed = used.iter().filter(|&&r| deleted[r][f] && completed[0].ordinal(r, f).is_some()).count();
        if let Ok(p) = rubin_pool(&est, &var) {
            out.insert(cb.fields[f].name.clone(), (p, imputed));
        }
    }
    out
}

/// Truth mean per field over `rows`.
pub fn truth_means(truth: &Dataset, fields: &[usize], rows: &[usize]) -> BTreeMap<String, f64> {
    fields
        .iter()
        .filter_map(|&f| {
            let v: Vec<f64> = rows.iter().filter_map(|&r| truth.ordinal(r, f)).map(f64::from).collect();
            mean(&v).map(|m| (truth.codebook.fields[f].name.clone(), m))
        })
        .collect()
}

/// Mean cosine between the embedded level labels of prediction and truth.
/// With the hashed embedder this is "fallback-similarity", not comparable to
/// a trained sentence encoder.
pub fn label_similarity(completed: &Dataset, truth: &Dataset, sel: &CellSelection, embedder: &dyn Embedder) -> Result<Option<f64>> {
    if sel.is_empty() {
        return Ok(None);
    }
    let mut cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for &(r, f) in &sel.cells {
        let spec = &truth.codebook.fields[f];
        let mut vec_of = |code| -> Result<Vec<f64>> {
            let label = spec.label(code).to_string();
            if let Some(v) = cache.get(&label) {
                return Ok(v.clone());
            }
            let v = embedder.embed(&label)?;
            cache.insert(label, v.clone());
            Ok(v)
        };
        let p = completed.respondents[r].answers[f].ok_or_else(|| Error::Undefined(format!("no prediction for {}", spec.name)))?;
        let t = truth.respondents[r].answers[f].expect("selection excludes skips");
        total += crate::llm::cosine(&vec_of(p)?, &vec_of(t)?);
    }
    Ok(Some(total / sel.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub scenario: String,
    pub block: String,
    pub seed: u64,
    pub n_cells: usize,
    pub m: usize,
    pub rmse: f64,
    pub signed_bias: f64,
    pub mae: f64,
    pub within1: f64,
    pub exact: f64,
    pub qwk: Option<f64>,
    pub sym_kl: f64,
    pub ols_coef_delta: Option<f64>,
    pub ci_coverage: Option<f64>,
    pub coverage_note: Option<String>,
    /// Embedding similarity of answer labels, tagged with its kind.
    pub similarity: Option<f64>,
    pub similarity_kind: Option<String>,
    pub compound: StratumMetrics,
    pub non_compound: StratumMetrics,
}

/// Everything needed to score one (method, scenario, block).
pub struct ReportInput<'a> {
    pub method: &'a str,
    pub scenario: &'a str,
    pub block: Option<Block>,
    pub seed: u64,
    pub truth: &'a Dataset,
    pub completed: &'a [Dataset],
    pub deleted: &'a [Vec<bool>],
    pub selection: &'a CellSelection,
    /// Rows of the evaluation population (coverage, OLS).
    pub rows: &'a [usize],
    pub weights: Option<&'a [Option<f64>]>,
    pub ols: Option<&'a OlsSpec>,
    pub embedder: Option<&'a dyn Embedder>,
}

pub fn metric_report(input: &ReportInput<'_>) -> Result<MetricReport> {
    let all = stratum_metrics(input.completed, input.truth, input.selection)?;
    if all.n_cells == 0 {
        return Err(Error::Undefined(format!("{} / {}: empty cell selection", input.method, input.scenario)));
    }
    let (compound, non_compound) = subgroup_stratify(input.completed, input.truth, input.selection)?;
    let ols_coef_delta = match input.ols {
        Some(spec) => match ols_coef_delta(input.completed, input.truth, input.rows, spec) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("{}: OLS drift unavailable: {e}", input.method);
                None
            }
        },
        None => None,
    };
    let cb = &input.truth.codebook;
    let fields: Vec<usize> = cb.target_fields().into_iter().filter(|&f| input.block.is_none_or(|b| cb.fields[f].block == b)).collect();
    let cov = if input.completed.len() < 2 {
        Coverage { fraction: None, covered: 0, fields: 0, excluded_b_zero: 0, reason: Some("coverage undefined for M=1".into()) }
    } else {
        let pooled: BTreeMap<String, PooledEstimate> =
            pooled_field_means(input.completed, input.deleted, &fields, input.rows, input.weights)
                .into_iter()
                .map(|(k, (p, _))| (k, p))
                .collect();
        ci_coverage(&pooled, &truth_means(input.truth, &fields, input.rows))
    };
    let coverage_note = match (&cov.reason, cov.excluded_b_zero) {
        (Some(r), _) => Some(r.clone()),
        (None, 0) => None,
        (None, k) => Some(format!("{k} field(s) excluded with B=0")),
    };
    let similarity = match input.embedder {
        Some(e) => label_similarity(&input.completed[0], input.truth, input.selection, e)?,
        None => None,
    };
    Ok(MetricReport {
        method: input.method.into(),
        scenario: input.scenario.into(),
        block: block_label(input.block).into(),
        seed: input.seed,
        n_cells: all.n_cells,
        m: input.completed.len(),
        rmse: all.rmse.unwrap(),
        signed_bias: all.signed_bias.unwrap(),
        mae: all.mae.unwrap(),
        within1: all.within1.unwrap(),
        exact: all.exact.unwrap(),
        qwk: all.qwk,
        sym_kl: all.sym_kl.unwrap(),
        ols_coef_delta,
        ci_coverage: cov.fraction,
        coverage_note,
        similarity,
        similarity_kind: input.embedder.map(|e| if e.id().starts_with("hashed") { "fallback-similarity".into() } else { e.id() }),
        compound,
        non_compound,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub const REPORT_COLUMNS: &[&str] = &[
    "method",
    "scenario",
    "block",
    "seed",
    "n_cells",
    "m",
    "rmse",
    "signed_bias",
    "mae",
    "within1",
    "exact",
    "qwk",
    "sym_kl",
    "ols_coef_delta",
    "ci_coverage",
    "coverage_note",
    "similarity",
    "similarity_kind",
    "compound_n",
    "compound_rmse",
    "compound_bias",
    "non_compound_n",
    "non_compound_rmse",
    "non_compound_bias",
];

/// One CSV row per report with a fixed column set and six-decimal floats.
pub fn write_reports_csv<W: std::io::Write>(w: W, reports: &[MetricReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS)?;
    for r in reports {
        out.write_record([
            r.method.clone(),
            r.scenario.clone(),
            r.block.clone(),
            r.seed.to_string(),
            r.n_cells.to_string(),
            r.m.to_string(),
            format!("{:.6}", r.rmse),
            format!("{:.6}", r.signed_bias),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.within1),
            format!("{:.6}", r.exact),
            opt(r.qwk),
            format!("{:.6}", r.sym_kl),
            opt(r.ols_coef_delta),
            opt(r.ci_coverage),
            r.coverage_note.clone().unwrap_or_default(),
            opt(r.similarity),
            r.similarity_kind.clone().unwrap_or_default(),
            r.compound.n_cells.to_string(),
            opt(r.compound.rmse),
            opt(r.compound.signed_bias),
            r.non_compound.n_cells.to_string(),
            opt(r.non_compound.rmse),
            opt(r.non_compound.signed_bias),
        ])?;
    }
    out.flush()?;
    Ok(())
}
