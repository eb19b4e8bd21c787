//! Stateless seed derivation.
//!
//! Every random stream in the engine is keyed by a master seed plus a tuple
//! of tags (purpose, episode, epoch, ...). Nothing carries RNG state across
//! episode boundaries, so resuming from a checkpoint replays the exact
//! streams an uninterrupted run would have used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod tag {
    pub const SCENE_TRAIN: u64 = 0x5443_454e_4501;
    pub const SCENE_HOLDOUT: u64 = 0x5443_454e_4502;
    pub const INIT: u64 = 0x494e_4954;
    pub const ASSIGN: u64 = 0x4153_5347;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const ADAPT: u64 = 0x4144_4150;
    pub const EVAL_SET: u64 = 0x4556_414c;
    pub const PLAN: u64 = 0x504c_414e;
    pub const RUN: u64 = 0x0052_554e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master` to obtain an independent 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tags: &[u64]) -> Rng {
    rng_from(derive_seed(master, tags))
}
