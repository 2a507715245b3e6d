//! Deterministic seed fan-out.
//!
//! One user-facing seed is split into independent named streams (data
//! generation, sampling, anchors, initialization) by hashing the seed
//! together with a stream path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATAGEN: u64 = 0x6461_7461;
pub const STREAM_SAMPLER: u64 = 0x7361_6d70;
pub const STREAM_ANCHORS: u64 = 0x616e_6368;
pub const STREAM_INIT: u64 = 0x696e_6974;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// FNV-1a, used to turn identifiers into stream components.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
