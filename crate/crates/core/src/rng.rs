//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed plus a tuple of stream tags, so results never depend on
//! how many draws another component made or which thread ran first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checksum::Fnv1a;

pub type Rng = ChaCha8Rng;

/// Stream tags for the different consumers of randomness.
pub mod stream {
    pub const IMAGE_ENCODER: u64 = 1;
    pub const TEXT_ENCODER: u64 = 2;
    pub const TOKEN: u64 = 3;
    pub const PROMPT_INIT: u64 = 4;
    pub const GAN_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const GAN_NOISE: u64 = 7;
    pub const FAKE_PICK: u64 = 8;
    pub const EVAL_NOISE: u64 = 9;
    pub const CENTROID: u64 = 10;
    pub const DOMAIN: u64 = 11;
    pub const SAMPLE: u64 = 12;
    pub const PARTITION: u64 = 13;
    pub const SPLIT: u64 = 14;
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&seed.to_le_bytes());
    for t in tags {
        h.update(&t.to_le_bytes());
    }
    h.finish()
}

pub fn seeded(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
