use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::codebook::{Code, Codebook, Condition};
use super::flags::{derive_flags, VulnerabilityFlags};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    /// One slot per codebook field, in codebook order. `None` means absent.
    pub answers: Vec<Option<Code>>,
    pub flags: VulnerabilityFlags,
}

impl Respondent {
    pub fn answer(&self, field: usize) -> Option<Code> {
        self.answers[field]
    }
}

/// State of a single cell as seen by metrics and imputers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Observed(Code),
    /// Legitimately absent under skip logic. Never imputed, never scored.
    Skipped,
    /// Absent in the source without a skip rule (item nonresponse).
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub codebook: Arc<Codebook>,
    pub respondents: Vec<Respondent>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(codebook: Arc<Codebook>, respondents: Vec<Respondent>, provenance: Provenance) -> Self {
        Self { codebook, respondents, provenance }
    }

    /// Build respondents from raw answers, deriving flags.
    pub fn from_answers(
        codebook: Arc<Codebook>,
        rows: Vec<(String, Vec<Option<Code>>)>,
        provenance: Provenance,
    ) -> Self {
        let respondents = rows
            .into_iter()
            .map(|(id, answers)| {
                let (flags, _) = derive_flags(&answers, &codebook);
                Respondent { id, answers, flags }
            })
            .collect();
        Self { codebook, respondents, provenance }
    }

    pub fn len(&self) -> usize {
        self.respondents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.respondents.is_empty()
    }

    pub fn cell(&self, row: usize, field: usize) -> CellState {
        match self.respondents[row].answers[field] {
            Some(c) => CellState::Observed(c),
            None if self.codebook.fields[field].skip_logic => CellState::Skipped,
            None => CellState::Missing,
        }
    }

    /// Ordinal value of a cell, when observed and ordinal.
    pub fn ordinal(&self, row: usize, field: usize) -> Option<u8> {
        let code = self.respondents[row].answers[field]?;
        self.codebook.fields[field].ordinal(code)
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            codebook: self.codebook.clone(),
            respondents: rows.iter().map(|&r| self.respondents[r].clone()).collect(),
            provenance: self.provenance,
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.respondents.iter().position(|r| r.id == id)
    }

    /// Records CSV: `id` column followed by canonical field names; cells hold
    /// level labels, empty when absent.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.codebook.fields.iter().map(|f| f.name.clone()));
        w.write_record(&header)?;
        for r in &self.respondents {
            let mut rec = vec![r.id.clone()];
            for (i, a) in r.answers.iter().enumerate() {
                rec.push(a.map(|c| self.codebook.fields[i].label(c).to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 labels")
    }
}

/// Load a records CSV against a codebook.
pub fn load_dataset(records: &Path, codebook: &Path) -> Result<Dataset> {
    let cb = Arc::new(Codebook::from_path(codebook)?);
    read_records(std::fs::File::open(records)?, cb, Provenance::Real)
}

pub fn read_records<R: Read>(reader: R, codebook: Arc<Codebook>, provenance: Provenance) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(Dataset::new(codebook, Vec::new(), provenance));
    }
    let mut columns = Vec::with_capacity(headers.len());
    let mut id_col = None;
    for (i, h) in headers.iter().enumerate() {
        let h = h.trim();
        if h == "id" {
            id_col = Some(i);
            columns.push(None);
        } else {
            columns.push(Some(codebook.require(h)?));
        }
    }
    let id_col = id_col.ok_or_else(|| Error::Config("records file has no `id` column".into()))?;
    for (i, f) in codebook.fields.iter().enumerate() {
        if !columns.contains(&Some(i)) {
            warn!("records file has no column for `{}`; treating as absent", f.name);
        }
    }

    let mut rows = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row_idx + 1;
        let mut answers = vec![None; codebook.len()];
        for (col, value) in rec.iter().enumerate() {
            let Some(field) = columns[col] else { continue };
            let value = value.trim();
            if value.is_empty() {
                continue;
            }
            answers[field] = Some(parse_cell(&codebook, field, value, row)?);
        }
        rows.push((rec[id_col].to_string(), answers));
    }
    Ok(Dataset::from_answers(codebook, rows, provenance))
}

fn parse_cell(cb: &Codebook, field: usize, value: &str, row: usize) -> Result<Code> {
    let spec = &cb.fields[field];
    if let Some(code) = spec.code_of(value) {
        return Ok(code);
    }
    if spec.is_ordinal() {
        if let Ok(v) = value.parse::<i64>() {
            if v >= 1 && v as usize <= spec.level_count() {
                return Ok((v - 1) as Code);
            }
            return Err(Error::OrdinalOutOfRange {
                row,
                field: spec.name.clone(),
                value: v,
                max: spec.level_count(),
            });
        }
    }
    Err(Error::UnknownLabel { row, field: spec.name.clone(), label: value.to_string() })
}

/// Deterministic train/validation partition.
///
/// Each respondent is ranked by a 64-bit digest of `(seed, id)`; the first
/// `ceil(ratio * n)` become training rows. Both halves keep source order.
pub fn split(dataset: &Dataset, seed: u64, ratio: f64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let n = dataset.len();
    let mut keyed: Vec<(u64, &str, usize)> = dataset
        .respondents
        .iter()
        .enumerate()
        .map(|(i, r)| (crate::rng::derive_seed(seed, &[b"split", r.id.as_bytes()]), r.id.as_str(), i))
        .collect();
    keyed.sort();
    let n_train = (ratio * n as f64).ceil() as usize;
    let mut is_train = vec![false; n];
    for &(_, _, i) in keyed.iter().take(n_train) {
        is_train[i] = true;
    }
    let train: Vec<usize> = (0..n).filter(|&i| is_train[i]).collect();
    let valid: Vec<usize> = (0..n).filter(|&i| !is_train[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&valid)))
}

/// A named subgroup: respondents satisfying every condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupDef {
    pub name: String,
    pub all_of: Vec<Condition>,
}

pub fn subgroup_defs_milton() -> Vec<SubgroupDef> {
    serde_json::from_str(crate::resources::SUBGROUPS).expect("embedded subgroup definitions")
}

fn matches_all(r: &Respondent, conds: &[(usize, Vec<Code>)]) -> bool {
    conds.iter().all(|(f, codes)| r.answers[*f].is_some_and(|c| codes.contains(&c)))
}

/// Percent of respondents in each subgroup (denominator: all respondents).
pub fn sample_composition(dataset: &Dataset, defs: &[SubgroupDef]) -> Result<BTreeMap<String, f64>> {
    let cb = &dataset.codebook;
    if dataset.is_empty() {
        return Err(Error::Undefined("composition of an empty dataset".into()));
    }
    let mut out = BTreeMap::new();
    for def in defs {
        let mut conds = Vec::new();
        for c in &def.all_of {
            cb.check_condition(c)?;
            let f = cb.require(&c.field)?;
            let codes = c.labels.iter().filter_map(|l| cb.fields[f].code_of(l)).collect();
            conds.push((f, codes));
        }
        let hits = dataset.respondents.iter().filter(|r| matches_all(r, &conds)).count();
        out.insert(def.name.clone(), 100.0 * hits as f64 / dataset.len() as f64);
    }
    Ok(out)
}
