//! Co-occurrence graph over `(field, level)` nodes.
//!
//! Edges carry joint counts from a training set and exist only for
//! permitted field pairs. The PMT variant permits a pair when the source
//! sits at a strictly earlier stage than the target; the data-driven
//! variant permits every ordered pair into a Block B/C field.

mod query;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use query::{crosstab, dataset_marginal, mixture, smoothed, ConditionalDistribution, Crosstab, SourceEvidence};

use crate::error::{Error, Result};
use crate::stats::spearman;
use crate::survey::{Code, Codebook, Dataset, Sign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphVariant {
    /// Stage-increasing pairs only.
    Pmt,
    /// Stage-increasing pairs whose empirical sign matches the declared one.
    Validated,
    /// Every ordered pair into a target field.
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRef {
    pub field: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub field: String,
    pub level: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u8>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: NodeRef,
    pub target: NodeRef,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FieldPair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Nodes whose field is the source of at least one permitted pair.
    pub source_node_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub pair_count: usize,
}

/// Outcome of the sign check for one ordinal-source pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub source: String,
    pub target: String,
    pub declared: Option<Sign>,
    pub rho: Option<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceGraph {
    pub variant: GraphVariant,
    pub alpha: f64,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub permitted_pairs: Vec<FieldPair>,
    pub stats: GraphStats,
    pub built_from_n: usize,
    pub codebook_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_checks: Vec<PairCheck>,
    #[serde(skip)]
    index: Option<Arc<Index>>,
}

impl PartialEq for CooccurrenceGraph {
    fn eq(&self, other: &Self) -> bool {
        self.to_json() == other.to_json()
    }
}

#[derive(Debug)]
struct Index {
    cb: Arc<Codebook>,
    node_counts: Vec<Vec<u64>>,
    /// Row-major `levels(source) × levels(target)` joint counts per pair.
    tables: HashMap<(usize, usize), Vec<u64>>,
    /// Permitted sources per target, in codebook order.
    sources: Vec<Vec<usize>>,
}

pub const DEFAULT_ALPHA: f64 = 1.0;

fn pmt_permitted(cb: &Codebook, s: usize, t: usize) -> bool {
    cb.fields[s].pmt_stage < cb.fields[t].pmt_stage
}

fn data_driven_permitted(cb: &Codebook, s: usize, t: usize) -> bool {
    s != t && cb.fields[t].is_target()
}

fn count_pair(train: &Dataset, s: usize, t: usize) -> Vec<u64> {
    let cb = &train.codebook;
    let lt = cb.fields[t].level_count();
    let mut table = vec![0u64; cb.fields[s].level_count() * lt];
    for r in &train.respondents {
        if let (Some(a), Some(b)) = (r.answers[s], r.answers[t]) {
            table[a as usize * lt + b as usize] += 1;
        }
    }
    table
}

impl CooccurrenceGraph {
    /// PMT-constrained graph with Laplace α=1.
    pub fn build(train: &Dataset) -> Result<Self> {
        Self::build_with(train, GraphVariant::Pmt, DEFAULT_ALPHA)
    }

    pub fn build_data_driven(train: &Dataset) -> Result<Self> {
        Self::build_with(train, GraphVariant::DataDriven, DEFAULT_ALPHA)
    }

    pub fn build_with(train: &Dataset, variant: GraphVariant, alpha: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot build a graph from an empty training set".into()));
        }
        if alpha <= 0.0 {
            return Err(Error::Config(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let cb = &train.codebook;
        let permitted: fn(&Codebook, usize, usize) -> bool = match variant {
            GraphVariant::Pmt => pmt_permitted,
            GraphVariant::DataDriven => data_driven_permitted,
            GraphVariant::Validated => {
                return Err(Error::Config("build the PMT graph, then call validated_subgraph".into()))
            }
        };
        let n = cb.len();
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|s| (0..n).map(move |t| (s, t))).filter(|&(s, t)| permitted(cb, s, t)).collect();
        let tables: HashMap<(usize, usize), Vec<u64>> =
            pairs.par_iter().map(|&(s, t)| ((s, t), count_pair(train, s, t))).collect();
        let mut node_counts: Vec<Vec<u64>> = cb.fields.iter().map(|f| vec![0; f.level_count()]).collect();
        for r in &train.respondents {
            for (f, a) in r.answers.iter().enumerate() {
                if let Some(c) = a {
                    node_counts[f][*c as usize] += 1;
                }
            }
        }
        let index = Index::new(train.codebook.clone(), node_counts, tables);
        Ok(Self::from_index(index, variant, alpha, train.len(), Vec::new()))
    }

    fn from_index(index: Index, variant: GraphVariant, alpha: f64, n: usize, pair_checks: Vec<PairCheck>) -> Self {
        let cb = &index.cb;
        let mut nodes = Vec::new();
        for (f, counts) in index.node_counts.iter().enumerate() {
            for (c, &count) in counts.iter().enumerate() {
                if count > 0 {
                    let spec = &cb.fields[f];
                    nodes.push(GraphNode {
                        field: spec.name.clone(),
                        level: spec.label(c as Code).to_string(),
                        ordinal: spec.ordinal(c as Code),
                        count,
                    });
                }
            }
        }
        let mut keys: Vec<(usize, usize)> = index.tables.keys().copied().collect();
        keys.sort();
        let mut edges = Vec::new();
        let mut permitted_pairs = Vec::new();
        let mut is_source = vec![false; cb.len()];
        for &(s, t) in &keys {
            is_source[s] = true;
            permitted_pairs.push(FieldPair { source: cb.fields[s].name.clone(), target: cb.fields[t].name.clone() });
            let lt = cb.fields[t].level_count();
            for (k, &count) in index.tables[&(s, t)].iter().enumerate() {
                if count > 0 {
                    edges.push(GraphEdge {
                        source: NodeRef { field: cb.fields[s].name.clone(), level: cb.fields[s].label((k / lt) as Code).into() },
                        target: NodeRef { field: cb.fields[t].name.clone(), level: cb.fields[t].label((k % lt) as Code).into() },
                        count,
                    });
                }
            }
        }
        let source_node_count =
            nodes.iter().filter(|n| cb.field_index(&n.field).is_some_and(|f| is_source[f])).count();
        let stats = GraphStats {
            source_node_count,
            node_count: nodes.len(),
            edge_count: edges.len(),
            pair_count: permitted_pairs.len(),
        };
        CooccurrenceGraph {
            variant,
            alpha,
            nodes,
            edges,
            permitted_pairs,
            stats,
            built_from_n: n,
            codebook_hash: cb.hash(),
            pair_checks,
            index: Some(Arc::new(index)),
        }
    }

    fn idx(&self) -> &Index {
        self.index.as_ref().expect("graph index is built on construction and load")
    }

    pub fn codebook(&self) -> &Arc<Codebook> {
        &self.idx().cb
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn hash(&self) -> String {
        crate::rng::content_hash(self.to_json().as_bytes())
    }

    /// Load a serialized graph and rebuild its lookup index.
    pub fn from_json(text: &str, cb: Arc<Codebook>) -> Result<Self> {
        let mut g: CooccurrenceGraph = serde_json::from_str(text)?;
        if g.codebook_hash != cb.hash() {
            return Err(Error::KeyMismatch("graph was built against a different codebook".into()));
        }
        let mut node_counts: Vec<Vec<u64>> = cb.fields.iter().map(|f| vec![0; f.level_count()]).collect();
        let resolve = |r: &NodeRef| -> Result<(usize, Code)> {
            let f = cb.require(&r.field)?;
            let c = cb.fields[f].code_of(&r.level).ok_or_else(|| Error::UnknownLabel {
                row: 0,
                field: r.field.clone(),
                label: r.level.clone(),
            })?;
            Ok((f, c))
        };
        for n in &g.nodes {
            let (f, c) = resolve(&NodeRef { field: n.field.clone(), level: n.level.clone() })?;
            node_counts[f][c as usize] = n.count;
        }
        let mut tables = HashMap::new();
        for p in &g.permitted_pairs {
            let (s, t) = (cb.require(&p.source)?, cb.require(&p.target)?);
            tables.insert((s, t), vec![0u64; cb.fields[s].level_count() * cb.fields[t].level_count()]);
        }
        for e in &g.edges {
            let (s, a) = resolve(&e.source)?;
            let (t, b) = resolve(&e.target)?;
            let lt = cb.fields[t].level_count();
            let table = tables
                .get_mut(&(s, t))
                .ok_or_else(|| Error::Config(format!("edge {}->{} outside permitted pairs", e.source.field, e.target.field)))?;
            table[a as usize * lt + b as usize] = e.count;
        }
        g.index = Some(Arc::new(Index::new(cb, node_counts, tables)));
        Ok(g)
    }

    pub fn is_permitted(&self, source: usize, target: usize) -> bool {
        self.idx().tables.contains_key(&(source, target))
    }

    /// Permitted sources of `target` in codebook order.
    pub fn sources_for(&self, target: usize) -> &[usize] {
        &self.idx().sources[target]
    }

    pub fn node_count(&self, field: usize, code: Code) -> u64 {
        self.idx().node_counts[field][code as usize]
    }

    pub fn node_counts(&self, field: usize) -> &[u64] {
        &self.idx().node_counts[field]
    }

    pub fn edge_count(&self, source: usize, s_code: Code, target: usize, t_code: Code) -> u64 {
        let lt = self.idx().cb.fields[target].level_count();
        self.idx().tables.get(&(source, target)).map_or(0, |t| t[s_code as usize * lt + t_code as usize])
    }

    /// Joint counts from `source = s_code` to each level of `target`.
    pub fn edge_row(&self, source: usize, s_code: Code, target: usize) -> Option<&[u64]> {
        let lt = self.idx().cb.fields[target].level_count();
        let start = s_code as usize * lt;
        self.idx().tables.get(&(source, target)).map(|t| &t[start..start + lt])
    }

    /// Restrict to pairs whose empirical Spearman sign agrees with the
    /// codebook's declared sign. Categorical-source pairs are kept as is;
    /// ordinal-source pairs without a declared sign are dropped.
    pub fn validated_subgraph(&self, train: &Dataset) -> Result<Self> {
        self.validated_with(train, &|s, t| self.codebook().declared_sign(s, t))
    }

    pub fn validated_with(&self, train: &Dataset, signs: &dyn Fn(usize, usize) -> Option<Sign>) -> Result<Self> {
        if self.variant != GraphVariant::Pmt {
            return Err(Error::Config("validated subgraph is derived from the PMT graph".into()));
        }
        let idx = self.idx();
        let cb = &idx.cb;
        let mut keys: Vec<(usize, usize)> = idx.tables.keys().copied().collect();
        keys.sort();
        let mut tables = HashMap::new();
        let mut checks = Vec::new();
        for (s, t) in keys {
            let keep = if !cb.fields[s].is_ordinal() {
                true
            } else {
                let declared = signs(s, t);
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for r in &train.respondents {
                    if let (Some(a), Some(b)) = (r.answers[s], r.answers[t]) {
                        xs.push(a as f64);
                        ys.push(b as f64);
                    }
                }
                let rho = spearman(&xs, &ys).ok();
                let kept = match (declared, rho) {
                    (None, _) => {
                        debug!("no declared sign for {} -> {}; pair excluded", cb.fields[s].name, cb.fields[t].name);
                        false
                    }
                    (Some(_), None) => {
                        warn!("spearman undefined for {} -> {}; pair excluded", cb.fields[s].name, cb.fields[t].name);
                        false
                    }
                    (Some(sign), Some(r)) => sign.matches(r),
                };
                checks.push(PairCheck {
                    source: cb.fields[s].name.clone(),
                    target: cb.fields[t].name.clone(),
                    declared,
                    rho,
                    kept,
                });
                kept
            };
            if keep {
                tables.insert((s, t), idx.tables[&(s, t)].clone());
            }
        }
        let index = Index::new(cb.clone(), idx.node_counts.clone(), tables);
        Ok(Self::from_index(index, GraphVariant::Validated, self.alpha, self.built_from_n, checks))
    }

    /// Field pairs as `(source, target)` indices, sorted.
    pub fn pair_indices(&self) -> Vec<(usize, usize)> {
        let mut keys: Vec<_> = self.idx().tables.keys().copied().collect();
        keys.sort();
        keys
    }

    /// Stage of each field pair, for reporting.
    pub fn pair_stages(&self) -> BTreeMap<(String, String), (u8, u8)> {
        let cb = self.codebook();
        self.pair_indices()
            .into_iter()
            .map(|(s, t)| {
                ((cb.fields[s].name.clone(), cb.fields[t].name.clone()), (cb.fields[s].pmt_stage, cb.fields[t].pmt_stage))
            })
            .collect()
    }
}

impl Index {
    fn new(cb: Arc<Codebook>, node_counts: Vec<Vec<u64>>, tables: HashMap<(usize, usize), Vec<u64>>) -> Self {
        let mut sources = vec![Vec::new(); cb.len()];
        for &(s, t) in tables.keys() {
            sources[t].push(s);
        }
        for s in &mut sources {
            s.sort();
        }
        Index { cb, node_counts, tables, sources }
    }
}
