//! Stage 1 instrument audit and Stage 2 sample-coverage prior.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::ChatProvider;
use crate::stats::{average_ranks, spearman};
use crate::survey::Codebook;

pub const CONSTRUCTS: [&str; 9] = [
    "Perceived Severity",
    "Perceived Vulnerability",
    "Fear Arousal",
    "Prior Experience",
    "Response Efficacy",
    "Self-Efficacy",
    "Response Cost",
    "Protection Motivation",
    "Protective Behavior",
];

pub const VALIDATION_RHO: f64 = 0.5;
pub const DIVERGENCE_RANKS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructDef {
    pub name: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructDefs {
    pub version: String,
    pub constructs: Vec<ConstructDef>,
}

impl ConstructDefs {
    pub fn builtin() -> Self {
        serde_json::from_str(crate::resources::CONSTRUCTS).expect("embedded construct definitions")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructScore {
    pub construct: String,
    pub score: u8,
    /// Canonical codebook names.
    pub items: Vec<String>,
    pub gaps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructAudit {
    /// In canonical construct order.
    pub constructs: Vec<ConstructScore>,
    pub redundancies: Vec<String>,
    pub verdict: String,
    /// Item names given as aliases, with the field they resolved to.
    pub resolved_aliases: Vec<(String, String)>,
}

impl ConstructAudit {
    pub fn get(&self, construct: &str) -> Option<&ConstructScore> {
        self.constructs.iter().find(|c| c.construct == construct)
    }

    pub fn gap_count(&self) -> usize {
        self.constructs.iter().map(|c| c.gaps.len()).sum()
    }
}

#[derive(Deserialize)]
struct RawScore {
    construct: String,
    score: serde_json::Value,
    #[serde(default)]
    items: Vec<String>,
    #[serde(default)]
    gaps: Vec<String>,
}

#[derive(Deserialize)]
struct RawAudit {
    constructs: Vec<RawScore>,
    #[serde(default)]
    redundancies: Vec<String>,
    #[serde(default)]
    verdict: String,
}

/// Map a construct label to its canonical name, ignoring case and a
/// trailing parenthetical such as "(temporal)".
fn canonical_construct(label: &str) -> Option<&'static str> {
    let base = label.split('(').next().unwrap_or("").trim().to_ascii_lowercase();
    CONSTRUCTS.iter().copied().find(|c| c.to_ascii_lowercase() == base)
}

/// The JSON object embedded in a reply, tolerating code fences and prose.
fn json_block(text: &str) -> Result<&str> {
    let start = text.find('{').ok_or_else(|| Error::Audit("no JSON object in response".into()))?;
    let end = text.rfind('}').ok_or_else(|| Error::Audit("unterminated JSON object".into()))?;
    if end < start {
        return Err(Error::Audit("unterminated JSON object".into()));
    }
    Ok(&text[start..=end])
}

pub fn parse_audit(text: &str, cb: &Codebook) -> Result<ConstructAudit> {
    let raw: RawAudit = serde_json::from_str(json_block(text)?).map_err(|e| Error::Audit(format!("malformed audit JSON: {e}")))?;
    let mut by_name: BTreeMap<&'static str, ConstructScore> = BTreeMap::new();
    let mut aliases = BTreeSet::new();
    for r in raw.constructs {
        let name = canonical_construct(&r.construct).ok_or_else(|| Error::Audit(format!("unknown construct `{}`", r.construct)))?;
        let score = r
            .score
            .as_u64()
            .filter(|s| (1..=5).contains(s))
            .ok_or_else(|| Error::Audit(format!("{name}: score {} is not an integer 1-5", r.score)))? as u8;
        let mut items = Vec::new();
        for item in r.items {
            let canon = cb
                .canonical_name(&item)
                .ok_or_else(|| Error::Audit(format!("{name}: item `{item}` is not in the codebook")))?
                .to_string();
            if canon != item {
                aliases.insert((item.clone(), canon.clone()));
            }
            if !items.contains(&canon) {
                items.push(canon);
            }
        }
        if by_name.insert(name, ConstructScore { construct: name.into(), score, items, gaps: r.gaps }).is_some() {
            return Err(Error::Audit(format!("duplicate construct: {name}")));
        }
    }
    let mut constructs = Vec::with_capacity(9);
    for c in CONSTRUCTS {
        constructs.push(by_name.remove(c).ok_or_else(|| Error::Audit(format!("missing construct: {c}")))?);
    }
    Ok(ConstructAudit { constructs, redundancies: raw.redundancies, verdict: raw.verdict, resolved_aliases: aliases.into_iter().collect() })
}

pub const AUDIT_SYSTEM: &str = "You are a survey methodologist auditing a questionnaire against Protection Motivation Theory. \
Reply with one JSON object and nothing else.";

/// The 16 Block B/C items with their scale ends, the nine construct
/// definitions and the required response schema.
pub fn audit_prompt(cb: &Codebook, defs: &ConstructDefs) -> String {
    let mut s = String::from("Instrument items:\n");
    for f in cb.target_fields() {
        let spec = &cb.fields[f];
        let lo = spec.levels.first().map(|l| l.label.as_str()).unwrap_or("");
        let hi = spec.levels.last().map(|l| l.label.as_str()).unwrap_or("");
        s.push_str(&format!("- {} (1 = {lo}; {} = {hi})\n", spec.name, spec.levels.len()));
    }
    s.push_str("\nConstructs:\n");
    for d in &defs.constructs {
        s.push_str(&format!("- {}: {}\n", d.name, d.definition));
    }
    s.push_str(
        "\nScore how adequately the instrument measures each construct (integer 1-5), list the item names mapped to it \
(exact names from the list above, empty if none) and recommend items to fill gaps. Schema:\n\
{\"constructs\": [{\"construct\": <name>, \"score\": <1-5>, \"items\": [<item>], \"gaps\": [<text>]}], \
\"redundancies\": [<text>], \"verdict\": <text>}\n",
    );
    s
}

/// Ask the provider for an audit; one repair retry on a rejected reply.
pub fn audit_instrument(cb: &Codebook, defs: &ConstructDefs, provider: &dyn ChatProvider) -> Result<ConstructAudit> {
    let prompt = audit_prompt(cb, defs);
    let first = provider.complete(AUDIT_SYSTEM, &prompt, 0.0)?;
    match parse_audit(&first, cb) {
        Ok(a) => Ok(a),
        Err(e) => {
            let repair = format!("{prompt}\nYour previous reply was rejected ({e}). Reply again with one JSON object following the schema exactly.");
            parse_audit(&provider.complete(AUDIT_SYSTEM, &repair, 0.0)?, cb)
        }
    }
}

/// Percentage with three decimals held as an integer count of 0.001 pp, so
/// that `sample + gap == reference` holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "f64", try_from = "f64")]
pub struct Percent(i64);

impl Percent {
    pub fn from_milli(m: i64) -> Self {
        Percent(m)
    }

    pub fn milli(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl From<Percent> for f64 {
    fn from(p: Percent) -> f64 {
        p.as_f64()
    }
}

impl TryFrom<f64> for Percent {
    type Error = Error;
    fn try_from(x: f64) -> Result<Self> {
        if !x.is_finite() || x.abs() > 1e9 {
            return Err(Error::Config(format!("percentage {x} is not finite")));
        }
        Ok(Percent((x * 1000.0).round() as i64))
    }
}

impl std::ops::Sub for Percent {
    type Output = Percent;
    fn sub(self, o: Percent) -> Percent {
        Percent(self.0 - o.0)
    }
}

impl std::ops::Add for Percent {
    type Output = Percent;
    fn add(self, o: Percent) -> Percent {
        Percent(self.0 + o.0)
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        if a % 100 == 0 {
            write!(f, "{sign}{}.{}", a / 1000, (a % 1000) / 100)
        } else {
            write!(f, "{sign}{}.{:03}", a / 1000, a % 1000)
        }
    }
}

pub fn percents(map: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Percent>> {
    map.iter().map(|(k, v)| Ok((k.clone(), Percent::try_from(*v)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub subgroup: String,
    pub sample: Percent,
    pub reference: Percent,
    /// `reference − sample`; positive means under-represented.
    pub gap: Percent,
    /// 1 = largest positive gap; ties averaged.
    pub empirical_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub spearman_rho: Option<f64>,
    pub validated: Option<bool>,
}

/// Rows follow the key order of `reference`.
pub fn compute_gap(sample: &BTreeMap<String, Percent>, reference: &BTreeMap<String, Percent>) -> Result<GapReport> {
    let a: BTreeSet<&String> = sample.keys().collect();
    let b: BTreeSet<&String> = reference.keys().collect();
    if a != b {
        let only_s: Vec<&&String> = a.difference(&b).collect();
        let only_r: Vec<&&String> = b.difference(&a).collect();
        return Err(Error::KeyMismatch(format!("only in sample: {only_s:?}; only in reference: {only_r:?}")));
    }
    let gaps: Vec<(String, Percent, Percent, Percent)> =
        reference.iter().map(|(k, &r)| (k.clone(), sample[k], r, r - sample[k])).collect();
    let neg: Vec<f64> = gaps.iter().map(|g| -(g.3.milli() as f64)).collect();
    let ranks = average_ranks(&neg);
    let rows = gaps
        .into_iter()
        .zip(ranks)
        .map(|((subgroup, sample, reference, gap), empirical_rank)| GapRow { subgroup, sample, reference, gap, empirical_rank })
        .collect();
    Ok(GapReport { rows, spearman_rho: None, validated: None })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub subgroup: String,
    pub rank: u32,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveragePrior {
    #[serde(default)]
    pub source: String,
    pub ranking: Vec<PriorEntry>,
}

impl CoveragePrior {
    pub fn builtin() -> Self {
        serde_json::from_str(crate::resources::COVERAGE_PRIOR).expect("embedded coverage prior")
    }

    /// Ranks form a permutation of 1..=n over exactly `subgroups`.
    pub fn validate(&self, subgroups: &BTreeSet<String>) -> Result<()> {
        let names: BTreeSet<String> = self.ranking.iter().map(|e| e.subgroup.clone()).collect();
        if names.len() != self.ranking.len() || &names != subgroups {
            return Err(Error::KeyMismatch(format!("prior subgroups {names:?} differ from {subgroups:?}")));
        }
        let mut ranks: Vec<u32> = self.ranking.iter().map(|e| e.rank).collect();
        ranks.sort_unstable();
        if ranks != (1..=self.ranking.len() as u32).collect::<Vec<_>>() {
            return Err(Error::Config(format!("prior ranks {ranks:?} are not a permutation")));
        }
        Ok(())
    }

    pub fn rank_of(&self, subgroup: &str) -> Option<u32> {
        self.ranking.iter().find(|e| e.subgroup == subgroup).map(|e| e.rank)
    }
}

pub const PRIOR_SYSTEM: &str = "You are a disaster-survey methodologist. Reply with one JSON object and nothing else.";

pub fn prior_prompt(subgroups: &[String]) -> String {
    format!(
        "Using only the published disaster-survey literature, rank these subgroups by how likely they are to be under-represented \
in an online convenience sample collected after a Florida hurricane (1 = most under-represented). Give a one-sentence justification for each.\n\
Subgroups: {}\nSchema: {{\"ranking\": [{{\"subgroup\": <name>, \"rank\": <int>, \"justification\": <text>}}]}}\n",
        subgroups.join("; ")
    )
}

pub fn elicit_prior(subgroups: &[String], provider: &dyn ChatProvider) -> Result<CoveragePrior> {
    let text = provider.complete(PRIOR_SYSTEM, &prior_prompt(subgroups), 0.0)?;
    let mut prior: CoveragePrior =
        serde_json::from_str(json_block(&text)?).map_err(|e| Error::Audit(format!("malformed prior JSON: {e}")))?;
    prior.source = provider.id();
    prior.validate(&subgroups.iter().cloned().collect())?;
    Ok(prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub subgroup: String,
    pub prior_rank: u32,
    pub empirical_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorValidation {
    pub rho: f64,
    pub validated: bool,
    /// Subgroups whose ranks differ by at least the divergence threshold.
    pub divergences: Vec<Divergence>,
}

pub fn validate_prior(prior: &CoveragePrior, gaps: &GapReport, divergence_threshold: f64) -> Result<PriorValidation> {
    prior.validate(&gaps.rows.iter().map(|r| r.subgroup.clone()).collect())?;
    let p: Vec<f64> = gaps.rows.iter().map(|r| prior.rank_of(&r.subgroup).unwrap() as f64).collect();
    let e: Vec<f64> = gaps.rows.iter().map(|r| r.empirical_rank).collect();
    let rho = spearman(&p, &e)?;
    let divergences = gaps
        .rows
        .iter()
        .zip(&p)
        .filter(|(r, &pr)| (pr - r.empirical_rank).abs() >= divergence_threshold)
        .map(|(r, &pr)| Divergence { subgroup: r.subgroup.clone(), prior_rank: pr as u32, empirical_rank: r.empirical_rank })
        .collect();
    Ok(PriorValidation { rho, validated: rho > VALIDATION_RHO, divergences })
}

/// Gap table with prior and empirical ranks.
pub fn gap_table(gaps: &GapReport, prior: Option<&CoveragePrior>) -> String {
    let mut s = format!("{:<20} {:>8} {:>8} {:>8} {:>6} {:>9}\n", "Subgroup", "Sample", "Ref", "Gap", "Prior", "Empirical");
    for r in &gaps.rows {
        let pr = prior.and_then(|p| p.rank_of(&r.subgroup)).map_or("-".to_string(), |x| x.to_string());
        let gap = if r.gap.milli() > 0 { format!("+{}", r.gap) } else { r.gap.to_string() };
        s.push_str(&format!("{:<20} {:>8} {:>8} {:>8} {:>6} {:>9}\n", r.subgroup, r.sample.to_string(), r.reference.to_string(), gap, pr, r.empirical_rank));
    }
    if let Some(rho) = gaps.spearman_rho {
        s.push_str(&format!("Spearman rho (prior vs empirical) = {rho:.3}\n"));
    }
    s
}
