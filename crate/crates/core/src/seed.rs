//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by a master seed mixed with integer tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

// Stream tags, kept distinct so that unrelated consumers never share a stream.
pub const TAG_SCENE: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_BATCH: u64 = 4;
pub const TAG_NOISE: u64 = 5;
pub const TAG_AL: u64 = 6;
pub const TAG_RANDOM_ACQ: u64 = 7;
