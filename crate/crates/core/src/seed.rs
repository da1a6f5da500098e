//! Named, keyed pseudo-random streams.
//!
//! Every stochastic operation derives its own seed from the user seed plus a
//! stream name and any per-item keys, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit seed from a base seed, a stream name and item keys.
pub fn derive(seed: u64, stream: &str, keys: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    for key in keys {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

pub fn rng(seed: u64, stream: &str, keys: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, keys))
}
