//! Stable seed derivation.
//!
//! Seeds for frames, stages, cells and steps are derived from a parent seed
//! with a fixed mixing function, so results never depend on scheduling order
//! or on `std`'s randomized hashers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an integer tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.rotate_left(17) ^ 0xD6E8_FEB8_6659_FD93)
}

/// Derive a child seed from a parent seed and a string key (e.g. a frame id).
pub fn derive_str(seed: u64, key: &str) -> u64 {
    // FNV-1a, 64 bit
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive(seed, h)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
