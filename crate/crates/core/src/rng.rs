//! Portable randomness.
//!
//! Every random stream in the crate is a SplitMix64 generator whose seed is
//! derived from the run seed and a string key with [`derive_seed`]. Draws are
//! mapped to indices and unit-interval floats with the fixed rules below, so
//! a stream can be replayed from any language that implements SplitMix64 and
//! 64-bit FNV-1a.

use rand::{RngCore, SeedableRng};
pub use rand_xoshiro::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed for the stream identified by `key` under run seed `seed`:
/// the first SplitMix64 output seeded with `seed ^ fnv1a64(key)`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    SplitMix64::seed_from_u64(seed ^ fnv1a64(key.as_bytes())).next_u64()
}

/// Generator for the stream identified by `key`.
pub fn stream(seed: u64, key: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, key))
}

/// Uniform index in `0..n` from one draw: `(x * n) >> 64`.
///
/// # Panics
/// If `n == 0`.
pub fn draw_index<R: RngCore>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "draw_index on empty range");
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniform float in `[0, 1)` from one draw: top 53 bits times 2^-53.
pub fn draw_unit<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
