//! Seed derivation. Every random stream in the crate is keyed by
//! `(base seed, stream tag, index)` so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags, so that e.g. patient 3 and member 3 never share a stream.
pub mod tag {
    pub const TRAIN_PATIENT: u64 = 1;
    pub const TEST_PATIENT: u64 = 2;
    pub const CENSOR: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
    pub const SUBSET: u64 = 7;
    pub const RUN: u64 = 8;
}

pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index)
}

pub fn rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
