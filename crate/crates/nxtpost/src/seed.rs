//! Deterministic seed derivation so that every random stream depends only on
//! the master seed and a stable label, never on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream`, element `index` under `master`.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}

pub mod streams {
    pub const CLUSTERS: u64 = 1;
    pub const USERS: u64 = 2;
    pub const POSTS: u64 = 3;
    pub const ENGAGE: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const NEGATIVES: u64 = 9;
    pub const PAIRS: u64 = 10;
    pub const EVAL: u64 = 11;
}
