//! Deterministic seed derivation.
//!
//! Every stochastic draw in the crate flows from a single `u64` through a
//! counter-based chain: sub-seeds are derived by mixing a string label and
//! a counter into the parent seed, and random streams are `ChaCha8`
//! instances keyed by the derived seed. There is no global RNG state, so
//! any sample, scene, or training step can be regenerated in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The splitmix64 step: advances `state` and returns a well-mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash, used to fold string labels into seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from `(seed, label, counter)`.
///
/// Each component passes through its own splitmix64 step so that nearby
/// counters and similar labels yield uncorrelated children.
pub fn derive(seed: u64, label: &str, counter: u64) -> u64 {
    let mut s0 = seed;
    let a = splitmix64(&mut s0);
    let mut s1 = a ^ fnv1a64(label.as_bytes());
    let b = splitmix64(&mut s1);
    let mut s2 = b ^ counter;
    splitmix64(&mut s2)
}

/// A deterministic random stream keyed by a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
