//! Deterministic seed derivation.
//!
//! Every random draw in the toolkit comes from a generator seeded by mixing a
//! root seed with a path of integers (image id, iteration, purpose tag, ...),
//! so results never depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Purpose tags keep independent streams apart.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const PAYLOAD: u64 = 2;
    pub const OBSERVE: u64 = 3;
    pub const PROPOSAL: u64 = 4;
    pub const BACKGROUND: u64 = 5;
    pub const ORACLE: u64 = 6;
    pub const FALSE_POS: u64 = 7;
    pub const LABELED_BATCH: u64 = 8;
    pub const UNLABELED_BATCH: u64 = 9;
    pub const FLIP: u64 = 10;
    pub const STRONG: u64 = 11;
    pub const SPLIT: u64 = 12;
    pub const CROP_DET: u64 = 13;
}
