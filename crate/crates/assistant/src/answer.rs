//! Compose answers from an evidence bundle, or refuse.

use serde::{Deserialize, Serialize};

use pmtkg::llm::ChatProvider;

use crate::detect::VariableBinding;
use crate::evidence::{CellKind, EvidenceBundle, EvidenceCell, EvidenceItem, StageTag};
use crate::grounding::{validate_grounding_with, GroundingReport, Validator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Answered,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    /// The numeric text as it appears in the answer.
    pub claim: String,
    pub cell: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composer {
    Template,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub question: String,
    pub status: Status,
    pub answer: String,
    pub citations: Vec<Citation>,
    pub pmt_notes: Vec<String>,
    pub refusal_reason: Option<String>,
    pub missing_evidence: Option<String>,
    pub composer: Composer,
    pub grounding: GroundingReport,
    pub binding: VariableBinding,
    pub evidence: EvidenceBundle,
    pub graph_hash: String,
}

pub const REASON_NO_VARIABLES: &str = "no variables detected";
pub const REASON_INSUFFICIENT: &str = "insufficient evidence";
pub const REASON_GROUNDING: &str = "grounding-failure";
const GROUNDING_MISSING: &str =
    "The composed answer contained numbers not found in the retrieved evidence. A grounded answer needs every figure to come from a retrieved cell.";

fn join_names(names: &[String]) -> String {
    match names.len() {
        0 => String::new(),
        1 => names[0].clone(),
        n => format!("{} and {}", names[..n - 1].join(", "), names[n - 1]),
    }
}

fn stage_phrase(tag: &StageTag) -> String {
    if tag.stage == 0 {
        format!("{} is a respondent-profile item", tag.field)
    } else {
        format!("{} is a Stage {} ({}) item", tag.field, tag.stage, tag.construct)
    }
}

/// Answer text with the citations recorded while writing it.
#[derive(Default)]
struct Writer {
    text: String,
    citations: Vec<Citation>,
}

impl Writer {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn percent(&mut self, cell: &EvidenceCell) {
        let claim = format!("{:.1}%", cell.percent.unwrap_or(0.0));
        self.text.push_str(&claim);
        self.citations.push(Citation { claim, cell: cell.id.clone() });
    }

    fn count(&mut self, cell: &EvidenceCell) {
        let claim = cell.count.to_string();
        self.text.push_str(&claim);
        self.citations.push(Citation { claim, cell: cell.id.clone() });
    }

    fn mean(&mut self, cell: &EvidenceCell) {
        let claim = format!("{:.2}", cell.mean.unwrap_or(0.0));
        self.text.push_str(&claim);
        self.citations.push(Citation { claim, cell: cell.id.clone() });
    }
}

fn marginal_text(w: &mut Writer, item: &EvidenceItem) -> String {
    let field = &item.fields[0];
    let total = item.cells.iter().find(|c| c.kind == CellKind::Total).expect("marginal has a total");
    if total.citable() {
        w.count(total);
        w.push(&format!(" respondents answered {field}. "));
    } else {
        w.push(&format!("{field} has an insufficient sample. "));
    }
    let levels: Vec<&EvidenceCell> = item.cells.iter().filter(|c| c.kind == CellKind::Level).collect();
    for (i, c) in levels.iter().enumerate() {
        if i > 0 {
            w.push("; ");
        }
        if c.citable() {
            w.percent(c);
            w.push(&format!(" chose \"{}\"", c.levels[0]));
        } else {
            w.push(&format!("\"{}\": insufficient sample", c.levels[0]));
        }
    }
    w.push(". ");
    if let Some(m) = item.cells.iter().find(|c| c.kind == CellKind::Mean && c.citable()) {
        w.push("The mean score is ");
        w.mean(m);
        if item.row_labels.len() == 5 {
            w.push(" on the 1 to 5 scale");
        }
        w.push(". ");
    }
    format!("{}.", stage_phrase(&item.stages[0]))
}

fn row_share(w: &mut Writer, item: &EvidenceItem, row: &str, col: &str) {
    match item.cells.iter().find(|c| c.kind == CellKind::RowPercent && c.levels[0] == row && c.levels[1] == col) {
        Some(c) if c.citable() => w.percent(c),
        _ => w.push("an insufficient sample"),
    }
}

fn crosstab_text(w: &mut Writer, item: &EvidenceItem) -> String {
    let (rf, cf) = (&item.fields[0], &item.fields[1]);
    let totals: Vec<&EvidenceCell> =
        item.cells.iter().filter(|c| c.kind == CellKind::Total && c.levels.len() == 1 && c.citable()).collect();
    let overall = item.cells.iter().find(|c| c.kind == CellKind::Total && c.levels.is_empty()).expect("crosstab has a total");
    if overall.citable() {
        w.count(overall);
        w.push(&format!(" respondents answered both {rf} and {cf}. "));
    }
    let (first_col, last_col) = (&item.col_labels[0], &item.col_labels[item.col_labels.len() - 1]);
    match (totals.first(), totals.last()) {
        (Some(lo), Some(hi)) if lo.id != hi.id => {
            w.push("Among the ");
            w.count(hi);
            w.push(&format!(" respondents with \"{}\" for {rf}, ", hi.levels[0]));
            row_share(w, item, &hi.levels[0], first_col);
            w.push(&format!(" reported \"{first_col}\" for {cf}, compared with "));
            row_share(w, item, &lo.levels[0], first_col);
            w.push(" of the ");
            w.count(lo);
            w.push(&format!(" respondents with \"{}\". ", lo.levels[0]));
            w.push(&format!("For \"{last_col}\" the shares were "));
            row_share(w, item, &hi.levels[0], last_col);
            w.push(" and ");
            row_share(w, item, &lo.levels[0], last_col);
            w.push(" respectively. ");
        }
        (Some(only), _) => {
            w.push(&format!("Only \"{}\" for {rf} has enough respondents (", only.levels[0]));
            w.count(only);
            w.push("); of them, ");
            row_share(w, item, &only.levels[0], first_col);
            w.push(&format!(" reported \"{first_col}\" for {cf}. "));
        }
        _ => w.push(&format!("Every level of {rf} has an insufficient sample for a comparison. ")),
    }
    let (a, b) = (&item.stages[0], &item.stages[1]);
    let b_phrase = if b.stage == 0 { format!("{} a respondent-profile item", b.field) } else { format!("{} a Stage {} ({}) item", b.field, b.stage, b.construct) };
    format!("{} and {b_phrase}; the graph reads {rf} as an antecedent of {cf} in the cascade.", stage_phrase(a))
}

/// Refusal decision and missing-evidence description, if any.
fn refusal(binding: &VariableBinding, bundle: &EvidenceBundle) -> Option<(&'static str, String)> {
    if binding.fields.is_empty() {
        return Some((
            REASON_NO_VARIABLES,
            "The question does not mention any survey item. Ask about a survey topic such as preparation stress, schedule flexibility or when preparation started.".into(),
        ));
    }
    if bundle.marginals().next().is_none() {
        return Some((REASON_INSUFFICIENT, format!("No responses to {} are recorded in the graph.", join_names(&binding.fields))));
    }
    if binding.fields.len() == 1 && binding.comparison {
        return Some((
            REASON_INSUFFICIENT,
            format!(
                "The question asks for a comparison but names only {}. A second survey item with a cross-tabulation against {} would be required.",
                binding.fields[0], binding.fields[0]
            ),
        ));
    }
    if binding.fields.len() >= 2 && bundle.crosstabs().next().is_none() {
        let pairs: Vec<String> = bundle
            .omitted
            .iter()
            .filter(|o| o.fields.len() == 2)
            .map(|o| format!("{} by {} ({})", o.fields[0], o.fields[1], o.reason))
            .collect();
        return Some((
            REASON_INSUFFICIENT,
            format!("A cross-tabulation from respondents who answered both items would be required: {}.", pairs.join("; ")),
        ));
    }
    None
}

fn refusal_text(binding: &VariableBinding, bundle: &EvidenceBundle, missing: &str) -> String {
    let retrieved: Vec<String> = bundle.marginals().map(|m| m.fields[0].clone()).collect();
    let mut s = String::from("I can't answer this from the survey evidence. ");
    if !retrieved.is_empty() && binding.fields.len() >= 2 {
        s.push_str(&format!(
            "I retrieved the distributions of {} but no cross-tabulation linking them, so any comparison would be unsupported. ",
            join_names(&retrieved)
        ));
    }
    s.push_str(missing);
    s
}

fn template(bundle: &EvidenceBundle) -> (String, Vec<Citation>, Vec<String>) {
    let mut w = Writer::default();
    let mut notes = Vec::new();
    let crosstabs: Vec<&EvidenceItem> = bundle.crosstabs().collect();
    if crosstabs.is_empty() {
        for m in bundle.marginals() {
            notes.push(marginal_text(&mut w, m));
        }
    } else {
        for c in crosstabs {
            notes.push(crosstab_text(&mut w, c));
        }
        for o in bundle.omitted.iter().filter(|o| o.fields.len() == 2) {
            w.push(&format!("No cross-tabulation of {} and {} is available ({}). ", o.fields[0], o.fields[1], o.reason));
        }
    }
    for n in &notes {
        w.push(n);
        w.push(" ");
    }
    (w.text.trim_end().to_string(), w.citations, notes)
}

pub const COMPOSE_SYSTEM: &str = "You answer questions about a hurricane-preparation survey using only the evidence provided. \
Quote every number exactly as written in the evidence (percentages with one decimal, counts as integers, means with two decimals). \
Never state a number that is not in the evidence and never use cells marked insufficient. Put level labels in double quotes.";

fn evidence_text(bundle: &EvidenceBundle) -> String {
    let mut s = String::new();
    for item in &bundle.items {
        s.push_str(&format!("[{}] {}\n", item.descriptor, item.stages.iter().map(stage_phrase).collect::<Vec<_>>().join("; ")));
        for c in &item.cells {
            if !c.citable() {
                s.push_str(&format!("  {}: insufficient sample\n", c.id));
                continue;
            }
            let v = match c.kind {
                CellKind::Total => format!("n={}", c.count),
                CellKind::Mean => format!("mean={:.2} (n={})", c.mean.unwrap_or(0.0), c.n),
                _ => format!("{:.1}% (count={}, n={})", c.percent.unwrap_or(0.0), c.count, c.n),
            };
            s.push_str(&format!("  {}: {v}\n", c.id));
        }
    }
    s
}

fn provider_compose(
    question: &str,
    bundle: &EvidenceBundle,
    provider: &dyn ChatProvider,
    validator: &Validator,
) -> Result<(String, GroundingReport), GroundingReport> {
    let base = format!("Evidence:\n{}\nQuestion: {question}\nAnswer in a short paragraph.", evidence_text(bundle));
    let mut prompt = base.clone();
    let mut last = None;
    for _ in 0..2 {
        let text = match provider.complete(COMPOSE_SYSTEM, &prompt, 0.0) {
            Ok(t) => t.trim().to_string(),
            Err(e) => {
                log::warn!("provider failed while composing: {e}");
                break;
            }
        };
        let report = validate_grounding_with(validator, &text, bundle);
        if report.passed {
            return Ok((text, report));
        }
        prompt = format!(
            "{base}\nYour previous answer contained numbers not present in the evidence: {}. Rewrite it using only evidence values.",
            report.unmatched.join(", ")
        );
        last = Some(report);
    }
    Err(last.unwrap_or(GroundingReport { passed: false, matches: vec![], unmatched: vec![] }))
}

pub fn compose_answer(
    question: &str,
    binding: VariableBinding,
    bundle: EvidenceBundle,
    provider: Option<&dyn ChatProvider>,
    validator: &Validator,
    graph_hash: &str,
) -> GroundedAnswer {
    let composer = if provider.is_some() { Composer::Provider } else { Composer::Template };
    let refuse = |reason: &str, missing: String, grounding: GroundingReport, binding: VariableBinding, bundle: EvidenceBundle| {
        let answer = refusal_text(&binding, &bundle, &missing);
        GroundedAnswer {
            question: question.into(),
            status: Status::Refused,
            answer,
            citations: vec![],
            pmt_notes: vec![],
            refusal_reason: Some(reason.into()),
            missing_evidence: Some(missing),
            composer,
            grounding,
            binding,
            evidence: bundle,
            graph_hash: graph_hash.into(),
        }
    };
    if let Some((reason, missing)) = refusal(&binding, &bundle) {
        let g = validate_grounding_with(validator, &refusal_text(&binding, &bundle, &missing), &bundle);
        return refuse(reason, missing, g, binding, bundle);
    }
    let (_, _, notes) = template(&bundle);
    let (answer, citations, grounding) = match provider {
        None => {
            let (text, citations, _) = template(&bundle);
            let g = validate_grounding_with(validator, &text, &bundle);
            (text, citations, g)
        }
        Some(p) => match provider_compose(question, &bundle, p, validator) {
            Ok((text, g)) => {
                let citations = g
                    .matches
                    .iter()
                    .map(|m| Citation { claim: m.token.text.clone(), cell: m.cells[0].clone() })
                    .collect();
                (text, citations, g)
            }
            Err(g) => return refuse(REASON_GROUNDING, GROUNDING_MISSING.into(), g, binding, bundle),
        },
    };
    if !grounding.passed {
        return refuse(REASON_GROUNDING, GROUNDING_MISSING.into(), grounding, binding, bundle);
    }
    GroundedAnswer {
        question: question.into(),
        status: Status::Answered,
        answer,
        citations,
        pmt_notes: notes,
        refusal_reason: None,
        missing_evidence: None,
        composer,
        grounding,
        binding,
        evidence: bundle,
        graph_hash: graph_hash.into(),
    }
}
