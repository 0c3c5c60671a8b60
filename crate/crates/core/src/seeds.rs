//! Deterministic sub-seed derivation. Every random decision in the crate
//! draws from a ChaCha stream derived from the run seed plus a purpose tag,
//! so runs with the same seed are bit-identical regardless of call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_SAMPLE: u64 = 3;
pub const TAG_DROPOUT: u64 = 4;
pub const TAG_SYNTH: u64 = 5;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a seed and a sequence of tags into one 64-bit sub-seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ t);
    }
    acc
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix(seed, tags))
}
