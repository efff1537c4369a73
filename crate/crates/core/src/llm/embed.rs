//! Text embeddings for retrieval and the fallback similarity metric.

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::survey::Dataset;

use super::evidence::persona_text;

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hashed bag of lower-cased alphanumeric tokens, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

impl HashedEmbedder {
    pub fn bucket(&self, token: &str) -> usize {
        let d = Sha256::digest(token.as_bytes());
        (u64::from_le_bytes(d[..8].try_into().unwrap()) % self.dim as u64) as usize
    }
}

impl Embedder for HashedEmbedder {
    fn id(&self) -> String {
        format!("hashed-bag-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for t in tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Flat index of training personas.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub embedder_id: String,
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn build_embedding_index(train: &Dataset, embedder: &dyn Embedder) -> Result<EmbeddingIndex> {
    let mut vectors = Vec::with_capacity(train.len());
    for r in &train.respondents {
        vectors.push(embedder.embed(&persona_text(&train.codebook, &r.answers))?);
    }
    Ok(EmbeddingIndex { embedder_id: embedder.id(), ids: train.respondents.iter().map(|r| r.id.clone()).collect(), vectors })
}

impl EmbeddingIndex {
    /// Row indices and cosine similarities of the `k` nearest entries, ties
    /// by id.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self.vectors.iter().enumerate().map(|(i, v)| (i, cosine(query, v))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        scored.truncate(k);
        scored
    }
}
