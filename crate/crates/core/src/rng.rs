//! Counter-based seeding. Every random stream in the crate is derived from a
//! user seed plus a tuple of integer coordinates, so work can be split across
//! threads without sharing generator state.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed together with a list of coordinates.
#[inline]
pub fn key(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    for &p in parts {
        h = mix64(h ^ p.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
    }
    h
}

/// A small fast generator positioned at `key(seed, parts)`.
#[inline]
pub fn stream(seed: u64, parts: &[u64]) -> SplitMix64 {
    SplitMix64::seed_from_u64(key(seed, parts))
}
