//! Graph conditional-expectation predictor, computed straight from the
//! graph without prompts or providers.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::CooccurrenceGraph;
use crate::survey::Code;

/// `round(E[target | known answers])` clamped to the target's ordinal range,
/// for every Block B/C field without a known answer.
pub fn reference_predict(graph: &CooccurrenceGraph, answers: &[Option<Code>]) -> Result<BTreeMap<String, u8>> {
    let cb = graph.codebook();
    let mut out = BTreeMap::new();
    for t in cb.target_fields() {
        let evidence: Vec<(usize, Code)> =
            answers.iter().enumerate().filter(|&(f, _)| f != t).filter_map(|(f, a)| a.map(|c| (f, c))).collect();
        let dist = graph.conditional(t, &evidence)?;
        let ords: Vec<f64> = cb.fields[t].levels.iter().map(|l| l.ordinal.unwrap_or(0) as f64).collect();
        let e: f64 = dist.probabilities.iter().zip(&ords).map(|(p, o)| p * o).sum();
        let lo = ords.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.insert(cb.fields[t].name.clone(), e.round().clamp(lo, hi) as u8);
    }
    Ok(out)
}
