//! Seed derivation. Every random draw in the crate comes from a ChaCha8 stream
//! keyed by the global seed plus a purpose tag, so modules never share streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

pub(crate) mod tag {
    pub const SPLIT: u64 = 1;
    pub const LAYOUT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const STYLE: u64 = 4;
    pub const TEXT: u64 = 5;
    pub const PROTOTYPE: u64 = 6;
    pub const BANK: u64 = 7;
    pub const BACKBONE: u64 = 8;
    pub const WARMUP: u64 = 9;
    pub const FIT: u64 = 10;
}
