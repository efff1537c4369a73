//! Theory-constrained survey analytics: codebook and respondents, synthetic
//! data, co-occurrence graphs, missingness simulation, imputation, LLM
//! prompting with graph evidence, evaluation and stage audits.

pub mod audit;
pub mod error;
pub mod eval;
pub mod graph;
pub mod impute;
pub mod llm;
pub mod missing;
pub mod resources;
pub mod rng;
pub mod stats;
pub mod survey;
pub mod synth;

pub use error::{Error, Result};
