//! Waveform container and degradation specifications.
//!
//! Decoding, resampling, and the degradation synthesis itself live in the
//! `clef` crate (they need codecs and the filesystem); this module holds the
//! shared types plus the pure SNR helper used to verify the noise degradation.

use crate::error::CoreError;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// A decoded mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Samples in [-1, 1].
    pub samples: Vec<f32>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
    /// Provenance id (normally the manifest clip_id).
    pub clip_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, clip_id: impl Into<String>) -> Self {
        AudioClip {
            samples,
            sample_rate,
            clip_id: clip_id.into(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean square of the samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|&s| f64::from(s) * f64::from(s))
            .sum::<f64>()
            / self.samples.len() as f64
    }

    /// Checks the clip invariants: positive rate, finite samples in [-1, 1].
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.sample_rate == 0 {
            return Err(CoreError::InvalidInput("sample_rate must be positive".into()));
        }
        for (i, &s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(CoreError::InvalidInput(format!(
                    "non-finite sample at index {i}"
                )));
            }
            if !(-1.0..=1.0).contains(&s) {
                return Err(CoreError::InvalidInput(format!(
                    "sample {s} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// The four controlled degradation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Mp3,
    Noise,
    Pitch,
    Tempo,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::Mp3,
        DegradationKind::Noise,
        DegradationKind::Pitch,
        DegradationKind::Tempo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DegradationKind::Mp3 => "mp3",
            DegradationKind::Noise => "noise",
            DegradationKind::Pitch => "pitch",
            DegradationKind::Tempo => "tempo",
        }
    }
}

/// Severity ladder. Only the severe anchors (32 kbps, SNR 10 dB) come from
/// the published analysis; the rest is a declared convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

/// A concrete degradation: kind, severity, and the per-kind parameter
/// (bitrate kbps, SNR dB, semitones, or stretch ratio).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: Severity,
    pub parameter: f64,
}

impl DegradationSpec {
    /// Standard parameter ladder: mp3 {128, 64, 32} kbps; noise SNR
    /// {30, 20, 10} dB; pitch {1, 2, 4} semitones (sign per clip by seed);
    /// tempo ratio {1.05, 1.12, 1.25} (direction per clip by seed).
    pub fn standard(kind: DegradationKind, severity: Severity) -> Self {
        use DegradationKind::*;
        use Severity::*;
        let parameter = match (kind, severity) {
            (Mp3, Mild) => 128.0,
            (Mp3, Moderate) => 64.0,
            (Mp3, Severe) => 32.0,
            (Noise, Mild) => 30.0,
            (Noise, Moderate) => 20.0,
            (Noise, Severe) => 10.0,
            (Pitch, Mild) => 1.0,
            (Pitch, Moderate) => 2.0,
            (Pitch, Severe) => 4.0,
            (Tempo, Mild) => 1.05,
            (Tempo, Moderate) => 1.12,
            (Tempo, Severe) => 1.25,
        };
        DegradationSpec {
            kind,
            severity,
            parameter,
        }
    }

    /// All twelve (kind, severity) cells with standard parameters.
    pub fn standard_grid() -> Vec<DegradationSpec> {
        let mut out = Vec::with_capacity(12);
        for kind in DegradationKind::ALL {
            for severity in Severity::ALL {
                out.push(DegradationSpec::standard(kind, severity));
            }
        }
        out
    }

    /// Whether the spec is a no-op on any input (rejected by the concordance
    /// harness).
    pub fn is_identity(&self) -> bool {
        match self.kind {
            DegradationKind::Noise => self.parameter.is_infinite(),
            DegradationKind::Pitch => self.parameter == 0.0,
            DegradationKind::Tempo => self.parameter == 1.0,
            DegradationKind::Mp3 => false,
        }
    }

    /// Parameter range check against the standard ladder's bounds.
    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = match self.kind {
            DegradationKind::Mp3 => (8.0..=320.0).contains(&self.parameter),
            DegradationKind::Noise => self.parameter >= 0.0, // +inf sentinel allowed
            DegradationKind::Pitch => self.parameter.abs() <= 12.0,
            DegradationKind::Tempo => (0.5..=2.0).contains(&self.parameter),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidInput(format!(
                "degradation parameter {} out of range for {}",
                self.parameter,
                self.kind.as_str()
            )))
        }
    }
}

/// SNR in dB of `noisy` against the reference `signal`, where the noise is
/// the sample-wise difference. Zero noise power returns +inf.
pub fn snr_of(signal: &AudioClip, noisy: &AudioClip) -> Result<f64, CoreError> {
    if signal.samples.len() != noisy.samples.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "clip lengths {} vs {}",
            signal.samples.len(),
            noisy.samples.len()
        )));
    }
    let mut p_signal = 0.0f64;
    let mut p_noise = 0.0f64;
    for (&s, &y) in signal.samples.iter().zip(noisy.samples.iter()) {
        let sf = f64::from(s);
        let nf = f64::from(y) - sf;
        p_signal += sf * sf;
        p_noise += nf * nf;
    }
    if p_noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(p_signal / p_noise))
}
