//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a top-level seed mixed with a phase tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed for `phase` from `seed`.
pub fn derive(seed: u64, phase: &str) -> u64 {
    phase
        .bytes()
        .fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

/// Derives a child seed for the `index`-th item of a phase (a layer, a fold).
pub fn derive_indexed(seed: u64, phase: &str, index: usize) -> u64 {
    mix(derive(seed, phase) ^ (index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
