//! Deterministic randomness: one 64-bit seed fans out into named substreams,
//! so each pipeline stage (and each item within a stage) draws from its own
//! reproducible generator regardless of what other stages consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the 32-byte ChaCha seed for `(seed, tag)`.
fn derive(seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(tag.as_bytes());
    h.finalize().into()
}

/// Named substream of the global seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive(seed, name))
}

/// Indexed substream: per-item generators that are independent of processing
/// order, e.g. one per caption or per query.
pub fn stream_at(seed: u64, name: &str, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive(seed, &format!("{name}/{index}")))
}
