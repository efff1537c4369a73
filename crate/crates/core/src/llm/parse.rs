//! Answer schema and response parsing.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::Codebook;

/// One requested answer: field name and its inclusive ordinal range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub field: String,
    pub min: u8,
    pub max: u8,
}

pub fn target_specs(cb: &Codebook, fields: &[usize]) -> Vec<TargetSpec> {
    fields
        .iter()
        .map(|&f| {
            let ords: Vec<u8> = cb.fields[f].levels.iter().filter_map(|l| l.ordinal).collect();
            TargetSpec { field: cb.fields[f].name.clone(), min: *ords.iter().min().unwrap(), max: *ords.iter().max().unwrap() }
        })
        .collect()
}

/// Schema lines `Field: <integer a-b>` with the scale's end labels.
pub fn schema_text(cb: &Codebook, targets: &[TargetSpec]) -> String {
    let mut s = String::from("Answer with exactly one line per field, in the form `Field: <integer>`:\n");
    for t in targets {
        let spec = &cb.fields[cb.require(&t.field).expect("target in codebook")];
        let lo = spec.levels.first().map(|l| l.label.as_str()).unwrap_or("");
        let hi = spec.levels.last().map(|l| l.label.as_str()).unwrap_or("");
        s.push_str(&format!("{}: <integer {}-{}> ({} = {lo}; {} = {hi})\n", t.field, t.min, t.max, t.min, t.max));
    }
    s
}

fn schema_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^([A-Za-z][A-Za-z0-9_]*): <integer (\d+)-(\d+)>").unwrap())
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[\s*\-`]*([A-Za-z][A-Za-z0-9_]*)[*`]*\s*:\s*[*`]*(-?\d+)[*`.]*\s*$").unwrap())
}

/// Recover the targets a prompt asks for from its schema lines.
pub fn schema_targets(prompt: &str) -> Vec<TargetSpec> {
    schema_re()
        .captures_iter(prompt)
        .filter_map(|c| Some(TargetSpec { field: c[1].to_string(), min: c[2].parse().ok()?, max: c[3].parse().ok()? }))
        .collect()
}

pub fn format_answers(answers: &BTreeMap<String, u8>, targets: &[TargetSpec]) -> String {
    targets.iter().map(|t| format!("{}: {}\n", t.field, answers[&t.field])).collect()
}

/// Line-oriented parse of `Field: <int>` answers. Every target must be
/// present and in range; unrelated lines are ignored.
pub fn parse_response(text: &str, targets: &[TargetSpec]) -> Result<BTreeMap<String, u8>> {
    let mut seen: BTreeMap<String, i64> = BTreeMap::new();
    for line in text.lines() {
        if let Some(c) = answer_re().captures(line) {
            if let Ok(v) = c[2].parse::<i64>() {
                seen.entry(c[1].to_string()).or_insert(v);
            }
        }
    }
    let mut out = BTreeMap::new();
    for t in targets {
        let v = *seen.get(&t.field).ok_or_else(|| Error::Parse(format!("{}: no answer in response", t.field)))?;
        if v < t.min as i64 || v > t.max as i64 {
            return Err(Error::Parse(format!("{}: answer {v} outside {}-{}", t.field, t.min, t.max)));
        }
        out.insert(t.field.clone(), v as u8);
    }
    Ok(out)
}
