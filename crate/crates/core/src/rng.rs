//! Seed derivation.
//!
//! Every random decision in a run draws from a ChaCha stream keyed by
//! `(seed, domain, index)`. Streams never depend on how many numbers an
//! earlier step consumed, which is what makes checkpoint resume replay the
//! exact same trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SearchRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SearchRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive(seed: u64, domain: &str, index: u64) -> SearchRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, for APIs that take a plain integer seed.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    use rand::RngCore;
    derive(seed, domain, index).next_u64()
}
