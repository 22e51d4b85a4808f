//! Encoder dispatch: computes features for the toy encoders, serves the
//! pretrained encoders from the on-disk cache only.
//!
//! MuQ/MERT inference is not implemented here; their features are produced
//! by an external dumper and dropped into the cache. A missing entry is a
//! retrieval error with a remediation hint, never silent fallback.

use anyhow::{anyhow, bail, Result};
use clef_core::audio::AudioClip;
use clef_core::features::{EncoderSpec, FeatureMatrix, MemoryFeatureStore};
use clef_core::toy::{toy_extract, ToyAttentionEncoder};
use clef_core::trainer::EncoderInput;
use std::path::Path;

use crate::cache::DiskFeatureStore;

/// How features for one encoder id are obtained.
pub enum Backend {
    /// Toy log-band features, frozen.
    Toy,
    /// Toy base features plus a small in-loop attention stack (the LoRA and
    /// fine-tune target). The cache stores the base features.
    ToyAttn(ToyAttentionEncoder),
    /// Pretrained encoder served exclusively from the cache.
    External(EncoderSpec),
}

impl Backend {
    pub fn for_id(encoder_id: &str) -> Result<Backend> {
        match encoder_id {
            "toy" => Ok(Backend::Toy),
            "toy-attn" => Ok(Backend::ToyAttn(ToyAttentionEncoder::standard())),
            other => {
                let spec = EncoderSpec::by_id(other)
                    .ok_or_else(|| anyhow!("unknown encoder {other:?}"))?;
                Ok(Backend::External(spec))
            }
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        match self {
            Backend::Toy => EncoderSpec::toy(),
            Backend::ToyAttn(e) => e.spec(),
            Backend::External(s) => s.clone(),
        }
    }

    /// The attention encoder for adaptable inference, when one exists.
    pub fn attention_encoder(&self) -> Option<&ToyAttentionEncoder> {
        match self {
            Backend::ToyAttn(e) => Some(e),
            _ => None,
        }
    }

    /// Trainer-facing encoder input. Frozen for `toy` and the external
    /// encoders; adaptable for `toy-attn`.
    pub fn encoder_input(&self) -> EncoderInput<'_> {
        match self {
            Backend::Toy => EncoderInput::Frozen(EncoderSpec::toy()),
            Backend::ToyAttn(e) => EncoderInput::Adaptable(e),
            Backend::External(s) => EncoderInput::Frozen(s.clone()),
        }
    }

    /// Whether this process can compute features itself (vs. cache-only).
    pub fn can_extract(&self) -> bool {
        !matches!(self, Backend::External(_))
    }

    /// Features to store for one normalized clip. For `toy-attn` these are
    /// the base features; the attention stack runs at train/predict time.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        match self {
            Backend::Toy => toy_extract(clip).map_err(|e| anyhow!("{e}")),
            Backend::ToyAttn(_) => {
                let mut f = toy_extract(clip).map_err(|e| anyhow!("{e}"))?;
                f.encoder_id = "toy-attn".into();
                Ok(f)
            }
            Backend::External(s) => bail!(
                "encoder {} weights are not bundled; extract features with an \
                 external dumper into the cache, then rerun",
                s.encoder_id
            ),
        }
    }
}

/// Loads the listed clips from the disk cache into memory. Training touches
/// every clip each epoch, so the loop always runs against RAM.
pub fn preload(
    cache_root: &Path,
    encoder_id: &str,
    clip_ids: impl IntoIterator<Item = impl AsRef<str>>,
) -> Result<MemoryFeatureStore> {
    use clef_core::features::FeatureStore;
    let disk = DiskFeatureStore::new(cache_root, encoder_id);
    let mut mem = MemoryFeatureStore::new();
    let mut missing = Vec::new();
    for id in clip_ids {
        let id = id.as_ref();
        match disk.get(id) {
            Ok(f) => mem.insert(f),
            Err(clef_core::CoreError::Incomplete(_)) => missing.push(id.to_string()),
            Err(e) => return Err(anyhow!("{e}")),
        }
    }
    if !missing.is_empty() {
        bail!(
            "{} clips have no cached features (first: {}); run `clef extract`",
            missing.len(),
            missing[0]
        );
    }
    Ok(mem)
}
