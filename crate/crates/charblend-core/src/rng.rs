//! Seed derivation: all randomness in an experiment flows from one
//! top-level seed through named roles, so a single `--seed` flag
//! reproduces everything.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a child seed from a master seed and a role tag.
///
/// Stable across platforms and releases: FNV-1a over the role bytes,
/// mixed with the master seed through splitmix64.
pub fn derive_seed(master: u64, role: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in role.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// The deterministic RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
