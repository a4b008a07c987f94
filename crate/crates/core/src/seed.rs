//! Labeled seed derivation.
//!
//! A run has one top-level seed. Each consumer (model init, corpus split,
//! shuffling, dropout) derives its own stream by hashing the parent seed with
//! a fixed label and optional counters, so adding a new consumer never moves
//! the randomness of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `parent`, a label, and any number of counters.
pub fn derive_seed(parent: u64, label: &str, counters: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for c in counters {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(parent: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label, counters))
}
