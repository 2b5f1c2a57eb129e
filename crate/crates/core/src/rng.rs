//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed mixed from a few integers, so results never depend on
//! scheduling or batch layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Domain tags keep streams for different purposes apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const DATA: u64 = 6;
}
