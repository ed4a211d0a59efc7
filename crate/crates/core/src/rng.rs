//! Deterministic per-item RNG streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded by
//! [`derive_seed`], a splitmix64 chain over
//! `(master_seed, stream_tag, item_id, draw_index)`. Items therefore own
//! disjoint streams and can be processed in any order (or in parallel)
//! without changing results. Bit-exactness is guaranteed within this
//! implementation, not across languages.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags keeping unrelated draw families apart.
pub mod stream {
    pub const PROTOTYPE: u64 = 0x11;
    pub const TRAIN_SAMPLE: u64 = 0x12;
    pub const EVAL_SAMPLE: u64 = 0x13;
    pub const LABEL_BANK: u64 = 0x14;
    pub const MLP_INIT: u64 = 0x21;
    pub const MLP_SHUFFLE: u64 = 0x22;
    pub const TARGET_PICK: u64 = 0x31;
    pub const ATTACK: u64 = 0x32;
    pub const EOT_DRAW: u64 = 0x33;
    pub const CONSENSUS_DRAW: u64 = 0x41;
    pub const ETA_TRIAL: u64 = 0x42;
    pub const DM_FORWARD: u64 = 0x51;
    pub const DM_STEP: u64 = 0x52;
    pub const TRANSFORM: u64 = 0x61;
    pub const SINGLE_RECON: u64 = 0x62;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `(master, tag, id, draw)` into a single 64-bit seed.
pub fn derive_seed(master: u64, tag: u64, id: u64, draw: u64) -> u64 {
    let mut h = splitmix64(master ^ 0xD6E8_FEB8_6659_FD93);
    h = splitmix64(h ^ tag);
    h = splitmix64(h ^ id);
    h = splitmix64(h ^ draw);
    h
}

/// Deterministic generator for a derived seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Vector of iid standard-normal draws.
pub fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}
