#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use serde::Deserialize;

use pmtkg::graph::CooccurrenceGraph;
use pmtkg::resources;
use pmtkg::survey::{read_records, Codebook, Dataset, Provenance};
use pmtkg_assistant::{Assistant, AssistantConfig};

pub const QUESTION_BANK: &str = include_str!("../../resources/question_bank.json");

#[derive(Debug, Deserialize)]
pub struct BankQuestion {
    pub id: String,
    pub question: String,
    pub fields: Vec<String>,
    pub expected: String,
}

#[derive(Debug, Deserialize)]
pub struct Bank {
    pub questions: Vec<BankQuestion>,
}

pub fn bank() -> Bank {
    serde_json::from_str(QUESTION_BANK).unwrap()
}

pub fn train() -> Dataset {
    read_records(resources::ASSISTANT_TRAIN_757.as_bytes(), Arc::new(Codebook::milton()), Provenance::Synthetic).unwrap()
}

pub fn graph() -> Arc<CooccurrenceGraph> {
    static G: OnceLock<Arc<CooccurrenceGraph>> = OnceLock::new();
    G.get_or_init(|| Arc::new(CooccurrenceGraph::build(&train()).unwrap())).clone()
}

pub fn assistant() -> Assistant {
    Assistant::new(graph(), AssistantConfig::default(), None).unwrap()
}
