//! Map a question to codebook fields.

use regex::Regex;
use serde::{Deserialize, Serialize};

use pmtkg::llm::ChatProvider;
use pmtkg::survey::Codebook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMethod {
    Provider,
    KeywordFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableBinding {
    pub question: String,
    /// Canonical field names in order of first mention.
    pub fields: Vec<String>,
    pub method: DetectionMethod,
    pub notes: Vec<String>,
    /// The question asks for a comparison or relationship.
    pub comparison: bool,
}

const COMPARISON_CUES: &[&str] = &[
    "more", "less", "fewer", "than", "compare", "compared", "comparison", "versus", "vs", "differ", "difference",
    "different", "relationship", "relate", "related", "associated", "association", "affect", "affected", "effect",
    "influence", "earlier", "later", "higher", "lower",
];

fn word_pattern(phrase: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(phrase))).expect("escaped phrase compiles")
}

pub fn has_comparison_cue(question: &str) -> bool {
    let q = question.to_lowercase();
    q.split(|c: char| !c.is_alphanumeric() && c != '-').any(|w| COMPARISON_CUES.contains(&w))
}

/// Matches field names and synonym phrases on word boundaries. Longer
/// phrases claim their span first; fields are ordered by first mention.
pub fn keyword_fields(question: &str, cb: &Codebook) -> Vec<String> {
    let mut phrases: Vec<(String, usize)> = Vec::new();
    for (f, spec) in cb.fields.iter().enumerate() {
        phrases.push((spec.name.clone(), f));
        phrases.push((spec.name.replace('_', " "), f));
        for s in cb.synonyms.get(&spec.name).into_iter().flatten() {
            phrases.push((s.clone(), f));
        }
    }
    phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
    let mut claimed: Vec<(usize, usize)> = Vec::new();
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for (phrase, f) in phrases {
        for m in word_pattern(&phrase).find_iter(question) {
            if claimed.iter().any(|&(s, e)| m.start() < e && s < m.end()) {
                continue;
            }
            claimed.push((m.start(), m.end()));
            hits.push((m.start(), f));
        }
    }
    hits.sort();
    let mut out: Vec<String> = Vec::new();
    for (_, f) in hits {
        let name = &cb.fields[f].name;
        if !out.contains(name) {
            out.push(name.clone());
        }
    }
    out
}

pub const DETECT_SYSTEM: &str = "You map survey questions to questionnaire variables. Reply with one JSON object and nothing else.";

pub fn detect_prompt(question: &str, cb: &Codebook) -> String {
    let mut s = String::from("Variables:\n");
    for spec in &cb.fields {
        let syn = cb.synonyms.get(&spec.name).map(|v| v.join(", ")).unwrap_or_default();
        s.push_str(&format!("- {} ({syn})\n", spec.name));
    }
    s.push_str(&format!(
        "\nQuestion: {question}\nList the variables the question is about, using the exact names above. \
Schema: {{\"fields\": [<name>]}}\n"
    ));
    s
}

#[derive(Deserialize)]
struct ProviderFields {
    fields: Vec<String>,
}

fn provider_fields(question: &str, cb: &Codebook, provider: &dyn ChatProvider) -> Result<(Vec<String>, Vec<String>), String> {
    let text = provider.complete(DETECT_SYSTEM, &detect_prompt(question, cb), 0.0).map_err(|e| e.to_string())?;
    let start = text.find('{').ok_or("no JSON object in reply")?;
    let end = text.rfind('}').filter(|&e| e > start).ok_or("unterminated JSON object")?;
    let parsed: ProviderFields = serde_json::from_str(&text[start..=end]).map_err(|e| e.to_string())?;
    let mut fields = Vec::new();
    let mut notes = Vec::new();
    for name in parsed.fields {
        match cb.canonical_name(&name) {
            Some(c) if !fields.iter().any(|f| f == c) => fields.push(c.to_string()),
            Some(_) => {}
            None => notes.push(format!("dropped `{name}`: not in the codebook")),
        }
    }
    Ok((fields, notes))
}

pub fn detect_variables(question: &str, cb: &Codebook, provider: Option<&dyn ChatProvider>) -> VariableBinding {
    let comparison = has_comparison_cue(question);
    if let Some(p) = provider {
        match provider_fields(question, cb, p) {
            Ok((fields, notes)) => {
                return VariableBinding { question: question.into(), fields, method: DetectionMethod::Provider, notes, comparison }
            }
            Err(e) => {
                let mut b = keyword_binding(question, cb, comparison);
                b.notes.push(format!("provider detection failed ({e}); keyword fallback used"));
                return b;
            }
        }
    }
    keyword_binding(question, cb, comparison)
}

fn keyword_binding(question: &str, cb: &Codebook, comparison: bool) -> VariableBinding {
    VariableBinding {
        question: question.into(),
        fields: keyword_fields(question, cb),
        method: DetectionMethod::KeywordFallback,
        notes: Vec::new(),
        comparison,
    }
}
