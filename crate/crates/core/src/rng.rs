//! Seeded random streams. Every consumer derives its own stream from a base
//! seed and a label path, so results do not depend on call order across
//! tasks and a resumed run replays the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream labels.
pub mod label {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CORESET: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const FISHER: u64 = 6;
    pub const CORESET_TRAIN: u64 = 7;
    pub const MLE: u64 = 8;
    pub const PERMUTATION: u64 = 9;
}
