//! Deterministic seed derivation.
//!
//! Every random draw in the crate descends from one user-visible `u64` seed.
//! Independent streams (per parameter, per scene, per sample chunk) are
//! carved out by mixing the seed with a stream tag, so results never depend
//! on thread scheduling or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// SplitMix64 finalizer: a cheap, well-mixed u64 -> u64 bijection.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string, for naming parameter streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a numeric tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Derives an independent stream seed from a base seed and a name.
pub fn derive_named(seed: u64, name: &str) -> u64 {
    derive(seed, fnv1a(name.as_bytes()))
}

/// Deterministic RNG for a derived seed.
pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
