//! Check that every number in an answer is a cell of the evidence bundle.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::evidence::{CellKind, EvidenceBundle};

/// Scale anchors and stage references that are not survey-derived claims.
pub fn default_whitelist() -> Vec<String> {
    vec![r"\b1 to 5\b".into(), r"\b1-5\b".into(), r"\b[Ss]tages? [0-6]\b".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericToken {
    pub text: String,
    pub value: f64,
    pub percent: bool,
    pub decimals: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatch {
    pub token: NumericToken,
    /// Citable cells the token agrees with, in bundle order.
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub passed: bool,
    pub matches: Vec<TokenMatch>,
    pub unmatched: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Validator {
    whitelist: Vec<Regex>,
    quoted: Regex,
    number: Regex,
}

impl Validator {
    pub fn new(whitelist: &[String]) -> Result<Self, regex::Error> {
        Ok(Validator {
            whitelist: whitelist.iter().map(|w| Regex::new(w)).collect::<Result<_, _>>()?,
            quoted: Regex::new(r#""([^"]*)""#).expect("static pattern"),
            number: Regex::new(r"([A-Za-z_]*)(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?(\s?%)?").expect("static pattern"),
        })
    }

    /// Numeric tokens left after removing quoted bundle labels and
    /// whitelisted phrases. Digits glued to a word (`S4`, `M0001`) are part
    /// of an identifier, not a number.
    pub fn tokens(&self, text: &str, labels: &[&str]) -> Vec<NumericToken> {
        let mut s = self
            .quoted
            .replace_all(text, |c: &regex::Captures| if labels.contains(&&c[1]) { " ".to_string() } else { c[0].to_string() })
            .into_owned();
        for w in &self.whitelist {
            s = w.replace_all(&s, " ").into_owned();
        }
        let mut out = Vec::new();
        for c in self.number.captures_iter(&s) {
            if !c[1].is_empty() {
                continue;
            }
            let int = c[2].replace(',', "");
            let frac = c.get(3).map_or("", |m| m.as_str());
            let value: f64 = format!("{int}{frac}").parse().expect("digits parse");
            out.push(NumericToken {
                text: c[0].trim().to_string(),
                value,
                percent: c.get(4).is_some(),
                decimals: frac.len().saturating_sub(1) as u32,
            });
        }
        out
    }
}

impl Default for Validator {
    fn default() -> Self {
        Validator::new(&default_whitelist()).expect("default whitelist compiles")
    }
}

fn half_unit(decimals: u32) -> f64 {
    0.5 * 10f64.powi(-(decimals as i32)) + 1e-9
}

/// Citable cells agreeing with a token: percents within rendering rounding,
/// integer counts exactly, decimals against field means.
pub fn matching_cells(token: &NumericToken, bundle: &EvidenceBundle) -> Vec<String> {
    let tol = half_unit(token.decimals);
    bundle
        .cells()
        .filter(|c| c.citable())
        .filter(|c| {
            if token.percent {
                c.percent.is_some_and(|p| (p - token.value).abs() <= tol)
            } else if token.decimals == 0 {
                c.kind != CellKind::Mean && c.count as f64 == token.value
            } else {
                c.mean.is_some_and(|m| (m - token.value).abs() <= tol)
            }
        })
        .map(|c| c.id.clone())
        .collect()
}

pub fn validate_grounding_with(validator: &Validator, text: &str, bundle: &EvidenceBundle) -> GroundingReport {
    let labels = bundle.labels();
    let mut matches = Vec::new();
    let mut unmatched = Vec::new();
    for token in validator.tokens(text, &labels) {
        let cells = matching_cells(&token, bundle);
        if cells.is_empty() {
            unmatched.push(token.text.clone());
        }
        matches.push(TokenMatch { token, cells });
    }
    GroundingReport { passed: unmatched.is_empty(), matches, unmatched }
}

pub fn validate_grounding(text: &str, bundle: &EvidenceBundle) -> GroundingReport {
    validate_grounding_with(&Validator::default(), text, bundle)
}
