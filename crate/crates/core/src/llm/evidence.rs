//! Evidence assembly: the delimited evidence pack, peer search and
//! subgroup deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::{Block, Code, Codebook, Dataset, FieldKind, Respondent};

pub const PACK_OPEN: &str = "<<<EVIDENCE>>>";
pub const PACK_CLOSE: &str = "<<<END EVIDENCE>>>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub target: String,
    /// `(field, level label)` pairs the distribution conditions on. Empty
    /// for marginals and for the marginal fallback.
    pub given: Vec<(String, String)>,
    pub probabilities: Vec<f64>,
    pub n: u64,
    pub fallback: bool,
}

impl Distribution {
    pub fn expectation(&self) -> f64 {
        self.probabilities.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    Random,
    Retrieved,
    Peers,
}

impl ExemplarKind {
    fn tag(self) -> &'static str {
        match self {
            ExemplarKind::Random => "random",
            ExemplarKind::Retrieved => "retrieved",
            ExemplarKind::Peers => "peers",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    /// Gower distance or cosine similarity, depending on the exemplar kind.
    pub score: Option<f64>,
    pub profile: Vec<(String, String)>,
    pub answers: Vec<(String, u8)>,
}

/// Evidence sections in fixed order. Empty sections are not rendered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidencePack {
    pub persona: Vec<(String, String)>,
    pub observed: Vec<(String, u8)>,
    pub marginals: Vec<Distribution>,
    pub conditionals: Vec<Distribution>,
    pub exemplar_kind: Option<ExemplarKind>,
    pub exemplars: Vec<Exemplar>,
    pub deltas: Vec<(String, f64)>,
    pub upstream: Vec<(String, u8)>,
}

fn probs_text(p: &[f64]) -> String {
    p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn pairs_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; ")
}

fn dist_line(d: &Distribution) -> String {
    let head = if d.fallback {
        format!("{} | marginal fallback", d.target)
    } else if d.given.is_empty() {
        d.target.clone()
    } else {
        format!("{} | {}", d.target, pairs_text(&d.given))
    };
    format!("{head} => p=[{}] n={}", probs_text(&d.probabilities), d.n)
}

impl EvidencePack {
    pub fn is_empty(&self) -> bool {
        *self == EvidencePack::default()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(PACK_OPEN);
        s.push('\n');
        if !self.persona.is_empty() {
            s.push_str("[persona]\n");
            for (k, v) in &self.persona {
                let _ = writeln!(s, "{k}: {v}");
            }
        }
        if !self.observed.is_empty() {
            s.push_str("[observed]\n");
            for (k, v) in &self.observed {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        if !self.marginals.is_empty() {
            s.push_str("[marginals]\n");
            for d in &self.marginals {
                let _ = writeln!(s, "{}", dist_line(d));
            }
        }
        if !self.conditionals.is_empty() {
            s.push_str("[conditionals]\n");
            for d in &self.conditionals {
                let _ = writeln!(s, "{}", dist_line(d));
            }
        }
        if let Some(kind) = self.exemplar_kind {
            let _ = writeln!(s, "[exemplars {}]", kind.tag());
            for e in &self.exemplars {
                let score = e.score.map(|x| format!(" score={x}")).unwrap_or_default();
                let answers = e.answers.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; ");
                let _ = writeln!(s, "{}{score} :: {} :: {answers}", e.id, pairs_text(&e.profile));
            }
        }
        if !self.deltas.is_empty() {
            s.push_str("[deltas]\n");
            for (k, d) in &self.deltas {
                let direction = if *d < 0.0 { "lower" } else { "higher" };
                let _ = writeln!(
                    s,
                    "{k}: compound-vulnerable training respondents tend to answer {direction} than the full training sample (mean difference {d} levels)"
                );
            }
        }
        if !self.upstream.is_empty() {
            s.push_str("[upstream]\n");
            for (k, v) in &self.upstream {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s.push_str(PACK_CLOSE);
        s
    }

    /// Parse the first delimited pack in `text`. `None` when absent.
    pub fn parse(text: &str) -> Result<Option<EvidencePack>> {
        let Some(start) = text.find(PACK_OPEN) else { return Ok(None) };
        let body = &text[start + PACK_OPEN.len()..];
        let end = body.find(PACK_CLOSE).ok_or_else(|| Error::Parse("evidence pack is not closed".into()))?;
        let mut pack = EvidencePack::default();
        let mut section = String::new();
        for line in body[..end].lines().map(str::trim_end).filter(|l| !l.is_empty()) {
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                if let Some(kind) = section.strip_prefix("exemplars ") {
                    pack.exemplar_kind = Some(match kind {
                        "random" => ExemplarKind::Random,
                        "retrieved" => ExemplarKind::Retrieved,
                        "peers" => ExemplarKind::Peers,
                        other => return Err(Error::Parse(format!("unknown exemplar kind `{other}`"))),
                    });
                    section = "exemplars".into();
                }
                continue;
            }
            let bad = || Error::Parse(format!("malformed evidence line in [{section}]: `{line}`"));
            match section.as_str() {
                "persona" => {
                    let (k, v) = line.split_once(": ").ok_or_else(bad)?;
                    pack.persona.push((k.into(), v.into()));
                }
                "observed" | "upstream" => {
                    let (k, v) = line.split_once('=').ok_or_else(bad)?;
                    let v: u8 = v.parse().map_err(|_| bad())?;
                    if section == "observed" {
                        pack.observed.push((k.into(), v));
                    } else {
                        pack.upstream.push((k.into(), v));
                    }
                }
                "marginals" | "conditionals" => {
                    let d = parse_dist(line).ok_or_else(bad)?;
                    if section == "marginals" {
                        pack.marginals.push(d);
                    } else {
                        pack.conditionals.push(d);
                    }
                }
                "exemplars" => {
                    let mut parts = line.splitn(3, " :: ");
                    let head = parts.next().ok_or_else(bad)?;
                    let profile = split_pairs(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
                    let answers = split_pairs(parts.next().ok_or_else(bad)?)
                        .ok_or_else(bad)?
                        .into_iter()
                        .map(|(k, v)| v.parse().map(|v| (k, v)))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    let (id, score) = match head.split_once(" score=") {
                        Some((id, s)) => (id.to_string(), Some(s.parse().map_err(|_| bad())?)),
                        None => (head.to_string(), None),
                    };
                    pack.exemplars.push(Exemplar { id, score, profile, answers });
                }
                "deltas" => {
                    let (k, rest) = line.split_once(": ").ok_or_else(bad)?;
                    let num = rest
                        .rsplit_once("(mean difference ")
                        .and_then(|(_, t)| t.strip_suffix(" levels)"))
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(bad)?;
                    pack.deltas.push((k.into(), num));
                }
                _ => return Err(bad()),
            }
        }
        Ok(Some(pack))
    }

    /// Conditional for `target`, else its marginal.
    pub fn distribution_for(&self, target: &str) -> Option<&Distribution> {
        self.conditionals.iter().find(|d| d.target == target).or_else(|| self.marginals.iter().find(|d| d.target == target))
    }

    pub fn delta_for(&self, target: &str) -> Option<f64> {
        self.deltas.iter().find(|(k, _)| k == target).map(|(_, d)| *d)
    }

    /// Every numeral token appearing in the rendered distributions, deltas
    /// and exemplar scores.
    pub fn statistics(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for d in self.marginals.iter().chain(&self.conditionals) {
            out.extend(&d.probabilities);
            out.push(d.n as f64);
        }
        out.extend(self.deltas.iter().map(|(_, d)| *d));
        out.extend(self.exemplars.iter().filter_map(|e| e.score));
        out
    }
}

fn split_pairs(text: &str) -> Option<Vec<(String, String)>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split("; ").map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string()))).collect()
}

fn parse_dist(line: &str) -> Option<Distribution> {
    let (head, tail) = line.split_once(" => p=[")?;
    let (probs, n) = tail.split_once("] n=")?;
    let probabilities = probs.split(", ").map(|p| p.parse().ok()).collect::<Option<Vec<f64>>>()?;
    let n = n.parse().ok()?;
    let (target, given, fallback) = match head.split_once(" | ") {
        None => (head.to_string(), Vec::new(), false),
        Some((t, "marginal fallback")) => (t.to_string(), Vec::new(), true),
        Some((t, g)) => (t.to_string(), split_pairs(g)?, false),
    };
    Some(Distribution { target, given, probabilities, n, fallback })
}

/// Labels used in packs may not contain the pack's delimiters.
pub fn check_labels(cb: &Codebook) -> Result<()> {
    for f in &cb.fields {
        for l in &f.levels {
            if ["; ", "=", " | ", " :: ", "\n", "[", "]"].iter().any(|d| l.label.contains(d)) {
                return Err(Error::Codebook(format!("label `{}` of `{}` contains an evidence delimiter", l.label, f.name)));
            }
        }
    }
    Ok(())
}

/// Block A profile as `(field, label)` pairs in codebook order.
pub fn profile(cb: &Codebook, answers: &[Option<Code>]) -> Vec<(String, String)> {
    cb.block_fields(Block::A)
        .into_iter()
        .filter_map(|f| answers[f].map(|c| (cb.fields[f].name.clone(), cb.fields[f].label(c).to_string())))
        .collect()
}

/// Persona serialization used for embeddings and prompts.
pub fn persona_text(cb: &Codebook, answers: &[Option<Code>]) -> String {
    profile(cb, answers).into_iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
}

pub fn exemplar(cb: &Codebook, r: &Respondent, score: Option<f64>) -> Exemplar {
    let answers = cb
        .target_fields()
        .into_iter()
        .filter_map(|f| r.answers[f].and_then(|c| cb.fields[f].ordinal(c)).map(|o| (cb.fields[f].name.clone(), o)))
        .collect();
    Exemplar { id: r.id.clone(), score, profile: profile(cb, &r.answers), answers }
}

/// Gower distance over Block A: categorical mismatch counts 1, ordinal
/// fields contribute `|Δ| / range`. Fields missing on either side are
/// skipped. `weights` defaults to 1 per field.
pub fn gower(cb: &Codebook, a: &[Option<Code>], b: &[Option<Code>], weights: &BTreeMap<String, f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for f in cb.block_fields(Block::A) {
        let spec = &cb.fields[f];
        let (Some(x), Some(y)) = (a[f], b[f]) else { continue };
        let w = weights.get(&spec.name).copied().unwrap_or(1.0);
        let d = match spec.kind {
            FieldKind::Categorical => (x != y) as u8 as f64,
            FieldKind::Ordinal => {
                let ords: Vec<u8> = spec.levels.iter().filter_map(|l| l.ordinal).collect();
                let range = (ords.iter().max().unwrap() - ords.iter().min().unwrap()) as f64;
                let (ox, oy) = (spec.ordinal(x).unwrap() as f64, spec.ordinal(y).unwrap() as f64);
                if range > 0.0 {
                    (ox - oy).abs() / range
                } else {
                    0.0
                }
            }
        };
        num += w * d;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// The `k` training respondents nearest by Gower distance, ties by id.
pub fn nearest_peers<'a>(
    persona: &[Option<Code>],
    train: &'a Dataset,
    k: usize,
    weights: &BTreeMap<String, f64>,
) -> Vec<(&'a Respondent, f64)> {
    let mut scored: Vec<(&Respondent, f64)> =
        train.respondents.iter().map(|r| (r, gower(&train.codebook, persona, &r.answers, weights))).collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
    scored.truncate(k);
    scored
}

/// `mean(compound) − mean(all)` per Block B/C field, kept when
/// `|delta| ≥ threshold`.
pub fn vulnerability_deltas(train: &Dataset, threshold: f64) -> BTreeMap<String, f64> {
    let cb = &train.codebook;
    let mut out = BTreeMap::new();
    if !train.respondents.iter().any(|r| r.flags.compound) {
        warn!("no compound-vulnerable respondents in training data; no deltas");
        return out;
    }
    for f in cb.target_fields() {
        let mut all = Vec::new();
        let mut comp = Vec::new();
        for (i, r) in train.respondents.iter().enumerate() {
            if let Some(v) = train.ordinal(i, f) {
                all.push(v as f64);
                if r.flags.compound {
                    comp.push(v as f64);
                }
            }
        }
        let (Some(ma), Some(mc)) = (crate::stats::mean(&all), crate::stats::mean(&comp)) else { continue };
        let d = mc - ma;
        if d.abs() >= threshold {
            out.insert(cb.fields[f].name.clone(), d);
        }
    }
    out
}
