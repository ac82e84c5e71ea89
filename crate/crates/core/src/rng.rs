//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed plus a purpose tag and counters, so any stream can
//! be recreated without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn derive_seed(seed: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(tag));
    for &c in counters {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(seed: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, counters))
}

/// Deterministic value in [0, 1) from a seed, tag and counters.
pub fn unit(seed: u64, tag: &str, counters: &[u64]) -> f64 {
    (derive_seed(seed, tag, counters) >> 11) as f64 / (1u64 << 53) as f64
}
