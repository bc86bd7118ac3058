//! Counter-based seeding: every random stream is a pure function of
//! `(master seed, tag, index)`, so results never depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

/// Generator used for all simulation streams.
pub type StreamRng = Xoshiro256PlusPlus;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream tags. Distinct tags keep e.g. environment layers and walker
/// replicas statistically independent even when they share an index.
pub mod tag {
    pub const LAYER: u64 = 0x4c41_5945_52;
    pub const WALK: u64 = 0x5741_4c4b;
    pub const ENV_REPLICA: u64 = 0x454e_5652;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const STABLE: u64 = 0x5354_4142;
    pub const PILOT: u64 = 0x5049_4c4f;
    pub const CHECK: u64 = 0x4348_4543;
}

fn mix(a: u64, b: u64) -> u64 {
    SplitMix64::seed_from_u64(a ^ b.wrapping_mul(GOLDEN)).next_u64()
}

/// Derives a 64-bit key from a master seed, a tag and a counter.
pub fn stream_key(master: u64, tag: u64, index: u64) -> u64 {
    mix(mix(master, tag), index)
}

/// Same as [`stream_key`] with a signed counter (layer indices).
pub fn stream_key_signed(master: u64, tag: u64, index: i64) -> u64 {
    stream_key(master, tag, index as u64)
}

pub fn stream(master: u64, tag: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(master, tag, index))
}
