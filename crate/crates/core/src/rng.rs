//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`SeededRng`]. Independent
//! streams for sub-tasks are derived with [`substream`] so that adding a
//! draw in one place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child stream of `seed` identified by `label` and `index`.
pub fn substream(seed: u64, label: &str, index: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}

/// Stable 64-bit seed derived from `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}
