//! Marginals and crosstabs retrieved from the graph for a binding.

use serde::{Deserialize, Serialize};

use pmtkg::graph::CooccurrenceGraph;
use pmtkg::survey::Codebook;

use crate::detect::VariableBinding;

pub const DEFAULT_MIN_SUPPORT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    /// Share of a field's respondents at one level.
    Level,
    /// Respondents answering a field, or a crosstab row total.
    Total,
    /// Share of a crosstab row at one column level.
    RowPercent,
    /// Mean ordinal score of a field.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCell {
    pub id: String,
    pub kind: CellKind,
    /// Level labels locating the cell: one for marginals, row then column
    /// for crosstabs; empty for totals and means of a whole field.
    pub levels: Vec<String>,
    pub count: u64,
    /// Respondents the percent or mean is taken over.
    pub n: u64,
    pub percent: Option<f64>,
    pub mean: Option<f64>,
    /// Below the minimum support: shown as "insufficient sample", never cited.
    pub insufficient: bool,
}

impl EvidenceCell {
    pub fn citable(&self) -> bool {
        !self.insufficient
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTag {
    pub field: String,
    pub stage: u8,
    pub construct: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    Marginal,
    Crosstab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub kind: ItemKind,
    /// The graph query that produced the item.
    pub descriptor: String,
    /// One field for marginals; row field then column field for crosstabs.
    pub fields: Vec<String>,
    pub stages: Vec<StageTag>,
    pub n: u64,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<EvidenceCell>,
}

impl EvidenceItem {
    pub fn cell(&self, id: &str) -> Option<&EvidenceCell> {
        self.cells.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Omission {
    pub fields: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub min_support: u64,
    pub items: Vec<EvidenceItem>,
    pub omitted: Vec<Omission>,
}

impl EvidenceBundle {
    pub fn marginals(&self) -> impl Iterator<Item = &EvidenceItem> {
        self.items.iter().filter(|i| i.kind == ItemKind::Marginal)
    }

    pub fn crosstabs(&self) -> impl Iterator<Item = &EvidenceItem> {
        self.items.iter().filter(|i| i.kind == ItemKind::Crosstab)
    }

    pub fn cells(&self) -> impl Iterator<Item = &EvidenceCell> {
        self.items.iter().flat_map(|i| i.cells.iter())
    }

    pub fn cell(&self, id: &str) -> Option<&EvidenceCell> {
        self.cells().find(|c| c.id == id)
    }

    /// Every level label and field name in the bundle.
    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for i in &self.items {
            v.extend(i.fields.iter().map(String::as_str));
            v.extend(i.row_labels.iter().map(String::as_str));
            v.extend(i.col_labels.iter().map(String::as_str));
        }
        v
    }
}

fn stage_tag(cb: &Codebook, f: usize) -> StageTag {
    let stage = cb.theory_stage(f);
    let construct = cb
        .stage_info(stage)
        .map(|s| s.construct.clone())
        .unwrap_or_else(|| "Respondent profile".to_string());
    StageTag { field: cb.fields[f].name.clone(), stage, construct }
}

fn pct(count: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| 100.0 * count as f64 / n as f64)
}

fn marginal_item(graph: &CooccurrenceGraph, f: usize, min_support: u64) -> Option<EvidenceItem> {
    let cb = graph.codebook();
    let spec = &cb.fields[f];
    let counts = graph.node_counts(f);
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return None;
    }
    let mut cells = vec![EvidenceCell {
        id: format!("m:{}:n", spec.name),
        kind: CellKind::Total,
        levels: vec![],
        count: n,
        n,
        percent: None,
        mean: None,
        insufficient: n < min_support,
    }];
    for (c, &count) in counts.iter().enumerate() {
        cells.push(EvidenceCell {
            id: format!("m:{}:{}", spec.name, spec.levels[c].label),
            kind: CellKind::Level,
            levels: vec![spec.levels[c].label.clone()],
            count,
            n,
            percent: pct(count, n),
            mean: None,
            insufficient: count < min_support || n < min_support,
        });
    }
    if spec.is_ordinal() {
        let sum: f64 = counts.iter().enumerate().map(|(c, &k)| k as f64 * spec.levels[c].ordinal.unwrap_or(0) as f64).sum();
        cells.push(EvidenceCell {
            id: format!("m:{}:mean", spec.name),
            kind: CellKind::Mean,
            levels: vec![],
            count: n,
            n,
            percent: None,
            mean: Some(sum / n as f64),
            insufficient: n < min_support,
        });
    }
    Some(EvidenceItem {
        kind: ItemKind::Marginal,
        descriptor: format!("marginal({})", spec.name),
        fields: vec![spec.name.clone()],
        stages: vec![stage_tag(cb, f)],
        n,
        row_labels: spec.levels.iter().map(|l| l.label.clone()).collect(),
        col_labels: vec![],
        cells,
    })
}

fn crosstab_item(graph: &CooccurrenceGraph, s: usize, t: usize, min_support: u64) -> Option<EvidenceItem> {
    let cb = graph.codebook();
    let ct = graph.pair_crosstab(s, t)?;
    if ct.n == 0 {
        return None;
    }
    let key = format!("{}|{}", ct.row_field, ct.col_field);
    let mut cells = vec![EvidenceCell {
        id: format!("x:{key}:n"),
        kind: CellKind::Total,
        levels: vec![],
        count: ct.n,
        n: ct.n,
        percent: None,
        mean: None,
        insufficient: ct.n < min_support,
    }];
    for (i, row) in ct.counts.iter().enumerate() {
        let total = ct.row_totals[i];
        cells.push(EvidenceCell {
            id: format!("x:{key}:{}", ct.row_labels[i]),
            kind: CellKind::Total,
            levels: vec![ct.row_labels[i].clone()],
            count: total,
            n: total,
            percent: None,
            mean: None,
            insufficient: total < min_support,
        });
        for (j, &count) in row.iter().enumerate() {
            cells.push(EvidenceCell {
                id: format!("x:{key}:{}|{}", ct.row_labels[i], ct.col_labels[j]),
                kind: CellKind::RowPercent,
                levels: vec![ct.row_labels[i].clone(), ct.col_labels[j].clone()],
                count,
                n: total,
                percent: ct.row_percents[i][j],
                mean: None,
                insufficient: count < min_support || total < min_support,
            });
        }
    }
    Some(EvidenceItem {
        kind: ItemKind::Crosstab,
        descriptor: format!("pair_crosstab({} -> {})", ct.row_field, ct.col_field),
        fields: vec![ct.row_field.clone(), ct.col_field.clone()],
        stages: vec![stage_tag(cb, s), stage_tag(cb, t)],
        n: ct.n,
        row_labels: ct.row_labels,
        col_labels: ct.col_labels,
        cells,
    })
}

/// One marginal per detected field and one crosstab per field pair the
/// graph holds joint counts for, oriented along the graph's edge direction.
pub fn retrieve_evidence(binding: &VariableBinding, graph: &CooccurrenceGraph, min_support: u64) -> EvidenceBundle {
    let cb = graph.codebook();
    let idx: Vec<usize> = binding.fields.iter().filter_map(|f| cb.field_index(f)).collect();
    let mut items = Vec::new();
    let mut omitted = Vec::new();
    for &f in &idx {
        match marginal_item(graph, f, min_support) {
            Some(m) => items.push(m),
            None => omitted.push(Omission { fields: vec![cb.fields[f].name.clone()], reason: "field never observed".into() }),
        }
    }
    for (a, &x) in idx.iter().enumerate() {
        for &y in &idx[a + 1..] {
            let names = vec![cb.fields[x].name.clone(), cb.fields[y].name.clone()];
            let (s, t) = if graph.is_permitted(x, y) {
                (x, y)
            } else if graph.is_permitted(y, x) {
                (y, x)
            } else {
                omitted.push(Omission { fields: names, reason: "pair not linked in the graph".into() });
                continue;
            };
            match crosstab_item(graph, s, t, min_support) {
                Some(c) => items.push(c),
                None => omitted.push(Omission { fields: names, reason: "no respondents answered both items".into() }),
            }
        }
    }
    EvidenceBundle { min_support, items, omitted }
}
