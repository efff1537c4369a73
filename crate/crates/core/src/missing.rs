//! Deletion masks for four missingness mechanisms.
//!
//! * S1: MCAR over Block B/C cells.
//! * S2: MAR, with higher deletion for low-income or minority respondents.
//! * S3: MNAR, Block C deletion rising as the respondent's true mean
//!   Block C score falls; Block B MCAR.
//! * S4: block-wise, the whole of Block C for compound-vulnerable
//!   respondents plus MCAR Block C deletion for everyone else.
//!
//! Each cell's draw is keyed by `(seed, mechanism, respondent id, field)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_uniform;
use crate::stats::fisher_exact_2x2;
use crate::survey::{Block, Code, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    S1,
    S2,
    S3,
    S4,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::S1, Mechanism::S2, Mechanism::S3, Mechanism::S4];

    pub fn is_mnar(self) -> bool {
        matches!(self, Mechanism::S3 | Mechanism::S4)
    }

    pub fn describe(self) -> &'static str {
        match self {
            Mechanism::S1 => "MCAR",
            Mechanism::S2 => "MAR (low income or minority)",
            Mechanism::S3 => "MNAR (low preparation scores)",
            Mechanism::S4 => "block-wise MNAR (compound vulnerability)",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Mechanism::S1),
            "S2" => Ok(Mechanism::S2),
            "S3" => Ok(Mechanism::S3),
            "S4" => Ok(Mechanism::S4),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismParams {
    pub s1_rate: f64,
    pub s2_base: f64,
    pub s2_flag_bonus: f64,
    pub s3_base: f64,
    pub s3_slope: f64,
    pub s3_block_b_rate: f64,
    pub s4_nonvuln_rate: f64,
}

impl Default for MechanismParams {
    fn default() -> Self {
        Self {
            s1_rate: 0.20,
            s2_base: 0.10,
            s2_flag_bonus: 0.20,
            s3_base: 0.10,
            s3_slope: 0.15,
            s3_block_b_rate: 0.10,
            s4_nonvuln_rate: 0.35,
        }
    }
}

impl MechanismParams {
    pub fn validate(&self, mechanism: Mechanism) -> Result<()> {
        let in_open = |x: f64| x > 0.0 && x < 1.0;
        let in_closed = |x: f64| (0.0..=1.0).contains(&x);
        let ok = match mechanism {
            Mechanism::S1 => in_open(self.s1_rate),
            Mechanism::S2 => in_closed(self.s2_base) && self.s2_flag_bonus >= 0.0 && self.s2_base + self.s2_flag_bonus < 1.0,
            Mechanism::S3 => {
                in_closed(self.s3_base) && in_closed(self.s3_base + self.s3_slope) && in_closed(self.s3_block_b_rate)
            }
            Mechanism::S4 => in_closed(self.s4_nonvuln_rate),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("parameters out of range for {mechanism}: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessMask {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub params: MechanismParams,
    pub respondent_ids: Vec<String>,
    pub fields: Vec<String>,
    /// `cells[row][field]`, true = deleted.
    pub cells: Vec<Vec<bool>>,
}

impl MissingnessMask {
    pub fn deleted_count(&self) -> usize {
        self.cells.iter().map(|r| r.iter().filter(|&&d| d).count()).sum()
    }

    /// Rows of `(respondent, field, deleted)` for every eligible cell.
    pub fn write_csv<W: Write>(&self, data: &Dataset, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["respondent", "field", "deleted"])?;
        for (r, row) in self.cells.iter().enumerate() {
            for (f, &d) in row.iter().enumerate() {
                if eligible(data, r, f) {
                    w.write_record([self.respondent_ids[r].as_str(), self.fields[f].as_str(), if d { "1" } else { "0" }])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serializes")
    }
}

/// A cell can be deleted when it is a Block B/C field holding a value.
pub fn eligible(data: &Dataset, row: usize, field: usize) -> bool {
    data.codebook.fields[field].block != Block::A && data.respondents[row].answers[field].is_some()
}

/// Ground truth plus a mask; `observed` is the truth with deleted cells blanked.
#[derive(Debug, Clone)]
pub struct MaskedDataset {
    pub truth: Arc<Dataset>,
    pub mask: MissingnessMask,
    pub observed: Dataset,
}

impl MaskedDataset {
    pub fn new(truth: Arc<Dataset>, mask: MissingnessMask) -> Result<Self> {
        if mask.cells.len() != truth.len() || mask.fields.len() != truth.codebook.len() {
            return Err(Error::Config("mask shape does not match dataset".into()));
        }
        for (r, id) in mask.respondent_ids.iter().enumerate() {
            if truth.respondents[r].id != *id {
                return Err(Error::KeyMismatch(format!("mask row {r} is `{id}`, dataset has `{}`", truth.respondents[r].id)));
            }
        }
        let mut observed = (*truth).clone();
        for (r, row) in mask.cells.iter().enumerate() {
            for (f, &d) in row.iter().enumerate() {
                if d {
                    if !eligible(&truth, r, f) {
                        return Err(Error::Config(format!("mask deletes ineligible cell ({}, {})", mask.respondent_ids[r], mask.fields[f])));
                    }
                    observed.respondents[r].answers[f] = None;
                }
            }
        }
        Ok(Self { truth, mask, observed })
    }

    pub fn is_deleted(&self, row: usize, field: usize) -> bool {
        self.mask.cells[row][field]
    }

    pub fn truth_code(&self, row: usize, field: usize) -> Option<Code> {
        self.truth.respondents[row].answers[field]
    }

    /// Deleted `(row, field)` cells in row-major order.
    pub fn deleted_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (r, row) in self.mask.cells.iter().enumerate() {
            for (f, &d) in row.iter().enumerate() {
                if d {
                    out.push((r, f));
                }
            }
        }
        out
    }

    /// Cells whose observed value differs from the source. Empty when the
    /// masked dataset faithfully preserves every undeleted cell.
    pub fn preservation_violations(&self) -> Vec<(usize, usize)> {
        let cb = &self.truth.codebook;
        let mut out = Vec::new();
        for (r, (o, t)) in self.observed.respondents.iter().zip(&self.truth.respondents).enumerate() {
            for f in 0..cb.len() {
                if self.mask.cells[r][f] {
                    continue;
                }
                let same = match (o.answers[f], t.answers[f]) {
                    (Some(a), Some(b)) => cb.fields[f].label(a).as_bytes() == cb.fields[f].label(b).as_bytes(),
                    (None, None) => true,
                    _ => false,
                };
                if !same || o.id != t.id {
                    out.push((r, f));
                }
            }
        }
        out
    }

    /// Fraction of eligible cells in `block` that are deleted.
    pub fn block_rate(&self, block: Block) -> f64 {
        let (mut del, mut tot) = (0usize, 0usize);
        for r in 0..self.truth.len() {
            for f in self.truth.codebook.block_fields(block) {
                if eligible(&self.truth, r, f) {
                    tot += 1;
                    del += self.mask.cells[r][f] as usize;
                }
            }
        }
        if tot == 0 {
            0.0
        } else {
            del as f64 / tot as f64
        }
    }

    /// Fraction of all eligible Block B/C cells that are deleted.
    pub fn overall_rate(&self) -> f64 {
        let eligible_cells: usize =
            (0..self.truth.len()).map(|r| (0..self.truth.codebook.len()).filter(|&f| eligible(&self.truth, r, f)).count()).sum();
        if eligible_cells == 0 {
            0.0
        } else {
            self.mask.deleted_count() as f64 / eligible_cells as f64
        }
    }
}

/// Mean ordinal of a respondent's observed Block C answers.
pub fn mean_block_c(data: &Dataset, row: usize) -> Option<f64> {
    let vals: Vec<f64> =
        data.codebook.block_fields(Block::C).into_iter().filter_map(|f| data.ordinal(row, f)).map(f64::from).collect();
    crate::stats::mean(&vals)
}

fn cell_probability(data: &Dataset, mechanism: Mechanism, p: &MechanismParams, row: usize, block: Block, c_mean: Option<f64>) -> f64 {
    let flags = data.respondents[row].flags;
    match mechanism {
        Mechanism::S1 => p.s1_rate,
        Mechanism::S2 => p.s2_base + if flags.low_income || flags.minority { p.s2_flag_bonus } else { 0.0 },
        Mechanism::S3 => match block {
            Block::B => p.s3_block_b_rate,
            _ => p.s3_base + p.s3_slope * (5.0 - c_mean.unwrap_or(5.0)) / 4.0,
        },
        Mechanism::S4 => match block {
            Block::B => 0.0,
            _ if flags.compound => 1.0,
            _ => p.s4_nonvuln_rate,
        },
    }
}

/// Deletion probability of a cell under a mechanism (0 for ineligible cells).
pub fn deletion_probability(data: &Dataset, mechanism: Mechanism, params: &MechanismParams, row: usize, field: usize) -> f64 {
    if !eligible(data, row, field) {
        return 0.0;
    }
    let block = data.codebook.fields[field].block;
    cell_probability(data, mechanism, params, row, block, mean_block_c(data, row))
}

pub fn apply(data: Arc<Dataset>, mechanism: Mechanism, params: MechanismParams, seed: u64) -> Result<MaskedDataset> {
    params.validate(mechanism)?;
    let cb = &data.codebook;
    let tag = mechanism.to_string();
    let cells: Vec<Vec<bool>> = (0..data.len())
        .into_par_iter()
        .map(|r| {
            let c_mean = mean_block_c(&data, r);
            let id = data.respondents[r].id.as_bytes();
            (0..cb.len())
                .map(|f| {
                    if !eligible(&data, r, f) {
                        return false;
                    }
                    let prob = cell_probability(&data, mechanism, &params, r, cb.fields[f].block, c_mean);
                    prob >= 1.0 || keyed_uniform(seed, &[tag.as_bytes(), id, cb.fields[f].name.as_bytes()]) < prob
                })
                .collect()
        })
        .collect();
    let mask = MissingnessMask {
        mechanism,
        seed,
        params,
        respondent_ids: data.respondents.iter().map(|r| r.id.clone()).collect(),
        fields: cb.fields.iter().map(|f| f.name.clone()).collect(),
        cells,
    };
    MaskedDataset::new(data, mask)
}

pub fn apply_s1(data: Arc<Dataset>, rate: f64, seed: u64) -> Result<MaskedDataset> {
    apply(data, Mechanism::S1, MechanismParams { s1_rate: rate, ..Default::default() }, seed)
}

pub fn apply_s2(data: Arc<Dataset>, base: f64, flag_bonus: f64, seed: u64) -> Result<MaskedDataset> {
    apply(data, Mechanism::S2, MechanismParams { s2_base: base, s2_flag_bonus: flag_bonus, ..Default::default() }, seed)
}

pub fn apply_s3(data: Arc<Dataset>, seed: u64) -> Result<MaskedDataset> {
    apply(data, Mechanism::S3, MechanismParams::default(), seed)
}

pub fn apply_s4(data: Arc<Dataset>, nonvuln_rate: f64, seed: u64) -> Result<MaskedDataset> {
    apply(data, Mechanism::S4, MechanismParams { s4_nonvuln_rate: nonvuln_rate, ..Default::default() }, seed)
}

/// 2×2 counts `[[a, b], [c, d]]` with the Fisher p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherTable {
    pub table: [[u64; 2]; 2],
    pub p: f64,
    /// A row or column margin is zero; the test carries no information.
    pub degenerate: bool,
}

impl FisherTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        let degenerate = a + b == 0 || c + d == 0 || a + c == 0 || b + d == 0;
        let p = if degenerate { 1.0 } else { fisher_exact_2x2(a, b, c, d) };
        Self { table: [[a, b], [c, d]], p, degenerate }
    }
}

/// Association tests for one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAssociation {
    pub mechanism: Mechanism,
    /// Respondents: any Block C deletion × compound flag.
    pub respondent_compound: FisherTable,
    /// Eligible Block C cells: deleted × compound flag.
    pub cell_compound: FisherTable,
    /// Eligible Block C cells: deleted × true mean Block C score below the median.
    pub cell_low_score: FisherTable,
}

impl MaskAssociation {
    /// The p-value of the table that targets this mechanism: low-score
    /// cells for S3, respondents × compound flag otherwise.
    pub fn mechanism_p(&self) -> f64 {
        match self.mechanism {
            Mechanism::S3 => self.cell_low_score.p,
            _ => self.respondent_compound.p,
        }
    }

    /// Smallest p-value across the three tables.
    pub fn min_p(&self) -> f64 {
        self.respondent_compound.p.min(self.cell_compound.p).min(self.cell_low_score.p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismContrast {
    pub x: MaskAssociation,
    pub y: MaskAssociation,
    /// Block C cells of compound respondents: deleted under X vs deleted under Y.
    pub contrast: FisherTable,
}

pub fn mask_association(m: &MaskedDataset) -> MaskAssociation {
    mask_association_rows(m, 0..m.truth.len())
}

/// Association over `rows` only, e.g. the rows a scoped mask could touch.
pub fn mask_association_rows(m: &MaskedDataset, rows: std::ops::Range<usize>) -> MaskAssociation {
    let data = &m.truth;
    let c_fields = data.codebook.block_fields(Block::C);
    let means: Vec<Option<f64>> = (0..data.len()).map(|r| if rows.contains(&r) { mean_block_c(data, r) } else { None }).collect();
    let mut sorted: Vec<f64> = means.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let mut resp = [[0u64; 2]; 2];
    let mut comp = [[0u64; 2]; 2];
    let mut low = [[0u64; 2]; 2];
    for r in rows {
        let compound = data.respondents[r].flags.compound;
        let is_low = means[r].is_some_and(|x| x < median);
        let mut any = false;
        let mut has_c = false;
        for &f in &c_fields {
            if !eligible(data, r, f) {
                continue;
            }
            has_c = true;
            let d = m.mask.cells[r][f];
            any |= d;
            comp[!d as usize][!compound as usize] += 1;
            low[!d as usize][!is_low as usize] += 1;
        }
        if has_c {
            resp[!any as usize][!compound as usize] += 1;
        }
    }
    let t = |x: [[u64; 2]; 2]| FisherTable::new(x[0][0], x[0][1], x[1][0], x[1][1]);
    MaskAssociation {
        mechanism: m.mask.mechanism,
        respondent_compound: t(resp),
        cell_compound: t(comp),
        cell_low_score: t(low),
    }
}

/// Compare two masks over the same dataset.
pub fn mechanism_contrast(x: &MaskedDataset, y: &MaskedDataset) -> Result<MechanismContrast> {
    if x.mask.respondent_ids != y.mask.respondent_ids {
        return Err(Error::KeyMismatch("masks cover different respondents".into()));
    }
    let data = &x.truth;
    let (mut dx, mut kx, mut dy, mut ky) = (0u64, 0u64, 0u64, 0u64);
    for r in 0..data.len() {
        if !data.respondents[r].flags.compound {
            continue;
        }
        for f in data.codebook.block_fields(Block::C) {
            if eligible(data, r, f) {
                if x.mask.cells[r][f] {
                    dx += 1
                } else {
                    kx += 1
                }
                if y.mask.cells[r][f] {
                    dy += 1
                } else {
                    ky += 1
                }
            }
        }
    }
    Ok(MechanismContrast { x: mask_association(x), y: mask_association(y), contrast: FisherTable::new(dx, kx, dy, ky) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::{Codebook, Provenance};
    use crate::synth::{generate, GeneratorConfig};

    fn synth(n: usize, seed: u64) -> Arc<Dataset> {
        Arc::new(generate(&GeneratorConfig::milton_like().with_n_seed(n, seed), Arc::new(Codebook::milton())).unwrap())
    }

    #[test]
    fn masks_are_deterministic_and_skip_block_a() {
        let ds = synth(300, 1);
        for m in Mechanism::ALL {
            let a = apply(ds.clone(), m, MechanismParams::default(), 42).unwrap();
            let b = apply(ds.clone(), m, MechanismParams::default(), 42).unwrap();
            assert_eq!(a.mask, b.mask);
            for (r, f) in a.deleted_cells() {
                assert_ne!(ds.codebook.fields[f].block, Block::A);
                assert!(ds.respondents[r].answers[f].is_some());
            }
            assert!(a.preservation_violations().is_empty());
        }
    }

    #[test]
    fn s3_probability_endpoints() {
        let cb = Arc::new(Codebook::milton());
        let mk = |code: Code| {
            let mut a = vec![Some(0); cb.len()];
            for f in cb.block_fields(Block::C) {
                a[f] = Some(code);
            }
            a
        };
        let ds = Dataset::from_answers(cb.clone(), vec![("hi".into(), mk(4)), ("lo".into(), mk(0))], Provenance::Synthetic);
        let c = cb.require("Prep_Stress").unwrap();
        let b = cb.require("Time_Family").unwrap();
        let p = MechanismParams::default();
        assert!((deletion_probability(&ds, Mechanism::S3, &p, 0, c) - 0.10).abs() < 1e-12);
        assert!((deletion_probability(&ds, Mechanism::S3, &p, 1, c) - 0.25).abs() < 1e-12);
        assert!((deletion_probability(&ds, Mechanism::S3, &p, 1, b) - 0.10).abs() < 1e-12);
        assert_eq!(deletion_probability(&ds, Mechanism::S3, &p, 0, cb.require("Age").unwrap()), 0.0);
    }

    #[test]
    fn tiny_rate_gives_valid_mask() {
        let ds = synth(10, 2);
        let m = apply_s1(ds, 0.0001, 42).unwrap();
        assert!(m.mask.deleted_count() <= 1);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let ds = synth(10, 2);
        assert!(apply_s1(ds.clone(), 0.0, 1).is_err());
        assert!(apply_s1(ds.clone(), 1.0, 1).is_err());
        assert!(apply_s2(ds, 0.5, 0.6, 1).is_err());
    }

    #[test]
    fn mask_rejects_wrong_dataset() {
        let a = synth(20, 1);
        let b = Arc::new(a.subset(&(0..19).collect::<Vec<_>>()));
        let m = apply_s1(a, 0.2, 1).unwrap();
        assert!(MaskedDataset::new(b, m.mask).is_err());
    }

    #[test]
    fn identical_masks_contrast_is_null() {
        let ds = synth(300, 4);
        let m = apply_s4(ds, 0.35, 9).unwrap();
        let c = mechanism_contrast(&m, &m).unwrap();
        assert_eq!(c.contrast.p, 1.0);
    }

    #[test]
    fn degenerate_margins_flagged() {
        let t = FisherTable::new(0, 0, 3, 4);
        assert!(t.degenerate);
        assert_eq!(t.p, 1.0);
    }

    #[test]
    fn mask_csv_has_one_row_per_eligible_cell() {
        let ds = synth(15, 3);
        let m = apply_s1(ds.clone(), 0.2, 3).unwrap();
        let mut buf = Vec::new();
        m.mask.write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let eligible_cells: usize = (0..ds.len()).map(|r| (0..ds.codebook.len()).filter(|&f| eligible(&ds, r, f)).count()).sum();
        assert_eq!(text.lines().count(), eligible_cells + 1);
        let back: MissingnessMask = serde_json::from_str(&m.mask.to_json()).unwrap();
        assert_eq!(back, m.mask);
    }
}

