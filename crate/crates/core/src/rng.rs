//! Deterministic random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from the master seed plus a list of integer tags (agent id, round,
//! purpose). Streams therefore never depend on execution order, which keeps
//! runs reproducible when agents are processed concurrently and lets a
//! checkpointed run resume bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that keep derived streams disjoint.
pub mod tag {
    pub const BACKBONE: u64 = 0x6261_636b;
    pub const PROTOTYPES: u64 = 0x7072_6f74;
    pub const AGENT_DATA: u64 = 0x6461_7461;
    pub const LOCAL_TRAIN: u64 = 0x7472_6e;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const PROBES: u64 = 0x7072_6f62;
    pub const TOPOLOGY: u64 = 0x746f_706f;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, tags))
}
