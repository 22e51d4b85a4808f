//! Frame-level feature containers and the encoder contract.

use crate::error::CoreError;
use crate::linalg::Mat;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

/// L x d matrix of frame-level encoder features for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Mat,
    pub frame_rate: f32,
    pub encoder_id: String,
    pub clip_id: String,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Checks shape against the declared encoder dimension and finiteness of
    /// all entries. `duration_seconds`, when known, bounds L to within one
    /// frame of duration x frame_rate.
    pub fn validate(
        &self,
        spec: &EncoderSpec,
        duration_seconds: Option<f64>,
    ) -> Result<(), CoreError> {
        if self.dim() != spec.hidden_dim {
            return Err(CoreError::ShapeMismatch(format!(
                "feature dim {} but encoder {} declares {}",
                self.dim(),
                spec.encoder_id,
                spec.hidden_dim
            )));
        }
        if !self.frames.is_finite() {
            return Err(CoreError::InvalidInput(format!(
                "non-finite feature for clip {}",
                self.clip_id
            )));
        }
        if let Some(dur) = duration_seconds {
            let expect = libm::floor(dur * f64::from(self.frame_rate));
            let l = self.num_frames() as f64;
            if (l - expect).abs() > 1.0 {
                return Err(CoreError::ShapeMismatch(format!(
                    "clip {}: {l} frames but expected {expect} +- 1",
                    self.clip_id
                )));
            }
        }
        Ok(())
    }
}

/// Declared contract of a feature encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub encoder_id: String,
    pub hidden_dim: usize,
    pub frame_rate: f32,
    /// Which hidden layer to read (counted from the input; the default is the
    /// final block).
    pub layer: u32,
    /// Whether LoRA targets (attention projections) exist.
    pub adaptable: bool,
}

impl EncoderSpec {
    /// Deterministic toy encoder: 50 Hz, d = 64, not adaptable.
    pub fn toy() -> Self {
        EncoderSpec {
            encoder_id: "toy".into(),
            hidden_dim: 64,
            frame_rate: 50.0,
            layer: 0,
            adaptable: false,
        }
    }

    /// Toy encoder followed by a small self-attention stack exposing
    /// Q/K/V/O projections (the LoRA and fine-tuning test target).
    pub fn toy_attn() -> Self {
        EncoderSpec {
            encoder_id: "toy-attn".into(),
            hidden_dim: 64,
            frame_rate: 50.0,
            layer: 2,
            adaptable: true,
        }
    }

    /// MuQ-310M contract: 24 layers, d = 1024, 50 Hz.
    pub fn muq_310m() -> Self {
        EncoderSpec {
            encoder_id: "muq-310m".into(),
            hidden_dim: 1024,
            frame_rate: 50.0,
            layer: 24,
            adaptable: true,
        }
    }

    /// MERT-95M contract: 12 layers, d = 768, 75 Hz.
    pub fn mert_95m() -> Self {
        EncoderSpec {
            encoder_id: "mert-95m".into(),
            hidden_dim: 768,
            frame_rate: 75.0,
            layer: 12,
            adaptable: true,
        }
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "toy" => Some(Self::toy()),
            "toy-attn" => Some(Self::toy_attn()),
            "muq-310m" => Some(Self::muq_310m()),
            "mert-95m" => Some(Self::mert_95m()),
            _ => None,
        }
    }
}

/// Source of per-clip features for training and evaluation.
pub trait FeatureStore {
    fn get(&self, clip_id: &str) -> Result<FeatureMatrix, CoreError>;
}

/// In-memory feature store.
#[derive(Debug, Default, Clone)]
pub struct MemoryFeatureStore {
    features: BTreeMap<String, FeatureMatrix>,
}

impl MemoryFeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, features: FeatureMatrix) {
        self.features.insert(features.clip_id.clone(), features);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl FeatureStore for MemoryFeatureStore {
    fn get(&self, clip_id: &str) -> Result<FeatureMatrix, CoreError> {
        self.features
            .get(clip_id)
            .cloned()
            .ok_or_else(|| CoreError::Incomplete(format!("no features for clip {clip_id}")))
    }
}
