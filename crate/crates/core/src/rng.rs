//! Counter-based random streams.
//!
//! Every random quantity in the simulator is drawn from a stream keyed by
//! `(seed, tag, indices...)`. Two evaluations of the same key always yield
//! the same numbers regardless of evaluation order, which is what lets the
//! parallel and sequential code paths agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. Keeping them in one place avoids accidental collisions.
pub mod tag {
    pub const LAYOUT: u64 = 0x4c41_594f;
    pub const SPAWN: u64 = 0x5350_574e;
    pub const ROUTE: u64 = 0x524f_5554;
    pub const SHADOW: u64 = 0x5348_4144;
    pub const FADING_INIT: u64 = 0x4641_4430;
    pub const FADING_STEP: u64 = 0x4641_4431;
    pub const LOS: u64 = 0x4c4f_5353;
    pub const ALLOCATION: u64 = 0x414c_4c4f;
    pub const SCHEDULE: u64 = 0x5343_4845;
    pub const EPISODE: u64 = 0x4550_4953;
    pub const ACT: u64 = 0x4143_5430;
    pub const LEARN: u64 = 0x4c45_524e;
    pub const INIT: u64 = 0x494e_4954;
    pub const EVAL: u64 = 0x4556_414c;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of words into a single 64-bit key.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Opens an independent stream for the given key.
pub fn stream(seed: u64, words: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, words))
}

/// Uniform draw in `[0, 1)` from a key, without materialising a stream.
pub fn unit(seed: u64, words: &[u64]) -> f64 {
    (mix(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
