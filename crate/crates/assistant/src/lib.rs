//! Question answering over a co-occurrence graph: every number in an
//! answer is a retrieved evidence cell, otherwise the question is refused.

pub mod answer;
pub mod detect;
pub mod evidence;
pub mod grounding;
pub mod service;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use pmtkg::graph::CooccurrenceGraph;
use pmtkg::llm::ChatProvider;
use pmtkg::{Error, Result};

pub use answer::{compose_answer, Citation, Composer, GroundedAnswer, Status};
pub use detect::{detect_variables, DetectionMethod, VariableBinding};
pub use evidence::{retrieve_evidence, EvidenceBundle, EvidenceCell, EvidenceItem, DEFAULT_MIN_SUPPORT};
pub use grounding::{validate_grounding, GroundingReport, Validator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssistantConfig {
    pub min_support: u64,
    pub numeric_whitelist: Vec<String>,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        AssistantConfig { min_support: DEFAULT_MIN_SUPPORT, numeric_whitelist: grounding::default_whitelist() }
    }
}

pub struct Assistant {
    graph: Arc<CooccurrenceGraph>,
    graph_hash: String,
    config: AssistantConfig,
    validator: Validator,
    provider: Option<Arc<dyn ChatProvider>>,
}

impl Assistant {
    /// Without a provider, detection uses keywords and answers use templates.
    pub fn new(graph: Arc<CooccurrenceGraph>, config: AssistantConfig, provider: Option<Arc<dyn ChatProvider>>) -> Result<Self> {
        let validator =
            Validator::new(&config.numeric_whitelist).map_err(|e| Error::Config(format!("numeric whitelist: {e}")))?;
        let graph_hash = graph.hash();
        Ok(Assistant { graph, graph_hash, config, validator, provider })
    }

    pub fn graph(&self) -> &CooccurrenceGraph {
        &self.graph
    }

    pub fn graph_hash(&self) -> &str {
        &self.graph_hash
    }

    pub fn config(&self) -> &AssistantConfig {
        &self.config
    }

    pub fn ask(&self, question: &str) -> Result<GroundedAnswer> {
        let question = question.trim();
        if question.is_empty() {
            return Err(Error::Config("question is empty".into()));
        }
        let provider = self.provider.as_deref();
        let binding = detect_variables(question, self.graph.codebook(), provider);
        let bundle = retrieve_evidence(&binding, &self.graph, self.config.min_support);
        Ok(compose_answer(question, binding, bundle, provider, &self.validator, &self.graph_hash))
    }
}
