//! Deterministic RNG stream derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by the
//! run seed plus a tuple of tags (record index, epoch, step, ...), so any
//! piece of work can be regenerated independently of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` and a path of tags.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let key = tags
        .iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Tag constants for the independent streams used by the pipeline.
pub mod tag {
    pub const PROTOTYPES: u64 = 1;
    pub const RECORD: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const STEP: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SHIFT: u64 = 7;
    pub const LIPSCHITZ: u64 = 8;
    pub const CANONICAL_NUISANCE: u64 = 9;
}
