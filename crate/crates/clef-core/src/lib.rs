//! Core algorithms for `clef`, a per-clip quality metric for generated music.
//!
//! This crate holds everything that does not touch the filesystem or an audio
//! codec: the predictor itself (attention pooling, MLP heads, LoRA deltas),
//! the training objectives and optimization loop, fold construction, the toy
//! encoder used for testing without large pretrained weights, and a
//! self-contained statistics toolbox (correlations, BCa bootstrap, Steiger
//! test).
//!
//! The crate is `no_std` + `alloc`; all randomness is explicitly seeded and
//! every public operation is deterministic given its inputs.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod math;
pub mod model;
pub mod objectives;
pub mod stats;
pub mod toy;
pub mod trainer;

pub use error::CoreError;

/// Splitmix64 step, used to derive independent RNG seeds from a base seed
/// and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, for mixing ids into seed derivation.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
