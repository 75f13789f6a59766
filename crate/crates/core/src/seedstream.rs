//! Deterministic named substreams derived from one 64-bit master seed.
//!
//! Every consumer of randomness asks for a stream by name (e.g.
//! `"track/frame=17/iter=3"`). The stream key is SHA-256 of the master seed
//! and the name, so streams are independent, order-insensitive, and stable
//! across runs and platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG for the substream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]); // domain separator between seed and name
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
