//! Counter-derived random streams.
//!
//! Every random draw in training and rendering comes from a stream keyed by
//! the run seed plus a path such as `(iteration, pixel)`, so results never
//! depend on scheduling and a resumed run replays the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// FNV-1a of a parameter name, used to key its initialization stream.
pub fn name_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Stream labels, kept distinct so unrelated consumers never share draws.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const CODEBOOK: u64 = 6;
    pub const VIEWS: u64 = 7;
}
