//! Deterministic random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `seed` and a path of tags (epoch, batch, example…).
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Tags separating the purposes a stream can serve.
pub mod tag {
    pub const SPEAKER: u64 = 1;
    pub const UTTERANCE: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const CROP: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRIALS: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
}
