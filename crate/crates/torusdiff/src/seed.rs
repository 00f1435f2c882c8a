//! Deterministic derivation of independent random streams from a master seed.
//!
//! Every stochastic component of the crate (trajectory noise, weight init,
//! batch shuffling, boundary-pair sampling, test points) pulls from its own
//! ChaCha8 stream whose seed is `derive(master, tag)` for a fixed string tag.
//! Streams with distinct tags are independent for practical purposes, and the
//! whole pipeline is reproducible from the single master seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby inputs.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, tag)`.
pub fn derive(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}

/// A ChaCha8 stream for the given `(master, tag)` pair.
pub fn stream(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag))
}
