//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! SHA-256 digest of a base seed plus labelled parts. Streams are therefore
//! independent of iteration order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from a base seed and a sequence of labelled parts.
pub fn derive_seed(base: u64, parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn stream(base: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// A single uniform draw in `[0, 1)` keyed by `(base, parts)`.
pub fn keyed_uniform(base: u64, parts: &[&[u8]]) -> f64 {
    // 53 high bits of the digest give an exactly representable dyadic rational.
    (derive_seed(base, parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Stable content hash, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
