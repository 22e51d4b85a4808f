//! Std companion to `clef-core`: audio IO and degradations, the on-disk
//! feature cache, checkpoints, manifests, run configuration, report
//! emission, and a synthetic dataset generator for end-to-end tests.

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod encoder;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod synth;

/// Crate version stamped into checkpoints and report provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
