//! Seed derivation and stream splitting.
//!
//! All randomness in the crate flows through explicitly seeded ChaCha
//! generators. Derived seeds are stable hashes of a parent seed plus string
//! labels, so adding a consumer never shifts the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derives a child seed from a parent seed and a label path.
///
/// The derivation is a SHA-256 hash truncated to 64 bits; it is stable
/// across platforms and releases.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    for label in labels {
        hasher.update([0xff]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derives a child seed from a parent seed and a numeric index path.
pub fn derive_seed_indexed(parent: u64, label: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(label.as_bytes());
    for index in indices {
        hasher.update([0xfe]);
        hasher.update(index.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Builds a generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience: a generator for a labelled child stream.
pub fn stream(parent: u64, labels: &[&str]) -> Rng {
    rng_from_seed(derive_seed(parent, labels))
}
