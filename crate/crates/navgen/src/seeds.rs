//! Derived deterministic RNG streams.
//!
//! Every randomized stage of the pipeline draws from its own ChaCha stream,
//! keyed by the run seed plus a purpose tag (episode id, chain index, epoch
//! number, ...). Independent streams mean that changing how many draws one
//! stage makes never perturbs any other stage, which is what keeps outputs
//! byte-identical across code paths that merely reorder work.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A ChaCha stream unique to `(seed, tag)`.
pub fn derived_rng(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// A derived `u64` seed for APIs that take one (e.g. instruction generation).
pub fn derived_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
