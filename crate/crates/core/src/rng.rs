//! Seed derivation. Every stochastic component draws from a ChaCha stream keyed by the run
//! seed plus a component-specific stream tag, so runs are reproducible and independent
//! streams never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer used to combine seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    let mut h = seed;
    for b in tag.bytes() {
        h = mix(h, b as u64);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn stream_indexed(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = seed;
    for b in tag.bytes() {
        h = mix(h, b as u64);
    }
    ChaCha8Rng::seed_from_u64(mix(h, index))
}
