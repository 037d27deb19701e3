//! Deterministic random streams.
//!
//! Every stochastic consumer gets a ChaCha8 generator keyed by a root `u64`
//! seed plus a 64-bit stream id. ChaCha is counter based, so two streams of
//! the same seed never overlap and no generator state is shared between
//! call sites. Stream ids are built hierarchically with [`stream_id`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of indices (purpose tag, step, sample, layer, ...) into one stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream purpose tags.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const EVAL_DATA: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const TASK: u64 = 5;
}
