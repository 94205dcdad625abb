//! Stable label-based seed derivation.
//!
//! Child seeds come from hashing the master seed together with a path of
//! labels, so adding or removing one arm of a run never shifts another's
//! random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"provmark/seed/v1");
    h.update(master.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
