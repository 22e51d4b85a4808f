//! Synthetic dataset generator: tone mixtures at graded SNRs with planted
//! MOS targets. Stands in for real annotated audio in end-to-end tests;
//! clip quality is an affine function of SNR plus observation noise, so a
//! working pipeline must recover high rank correlation.

use anyhow::Result;
use clef_core::audio::AudioClip;
use clef_core::dataset::ClipAnnotation;
use clef_core::{derive_seed, hash_str};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub n_systems: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clips: 200,
            n_systems: 10,
            seconds: 10.0,
            sample_rate: 24_000,
            seed: 23,
        }
    }
}

/// One generated clip with its ground truth.
pub struct SynthClip {
    pub annotation: ClipAnnotation,
    pub clip: AudioClip,
    pub snr_db: f64,
    pub planted_mi: f64,
    pub planted_ta: f64,
}

const SNR_LO: f64 = -4.0;
const SNR_HI: f64 = 24.0;

/// Affine SNR-to-MOS mapping shared by both dimensions.
fn mos_of_snr(snr_db: f64) -> f64 {
    1.0 + 4.0 * (snr_db - SNR_LO) / (SNR_HI - SNR_LO)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Five integer ratings in [1,5] whose mean is `y` rounded to the nearest
/// fifth.
fn ratings_for(y: f64) -> Vec<u8> {
    let y = y.clamp(1.0, 5.0);
    let fifths = (y * 5.0).round() as u32; // 5..=25
    let base = (fifths / 5).min(5) as u8;
    let rem = (fifths % 5) as usize;
    let mut out = vec![base; 5];
    for r in out.iter_mut().take(rem) {
        *r = base + 1;
    }
    out.sort_unstable();
    out
}

/// Deterministic tone-mixture dataset. Systems occupy graded SNR bands, so
/// both utterance- and system-level correlations are well defined.
pub fn generate(spec: &SynthSpec) -> Vec<SynthClip> {
    assert!(spec.n_systems >= 1 && spec.n_clips >= spec.n_systems);
    let n_samples = (f64::from(spec.sample_rate) * spec.seconds) as usize;
    let mut out = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let system = i % spec.n_systems;
        let clip_id = format!("clip_{i:04}");
        let system_id = format!("sys_{system:02}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, hash_str(&clip_id)));

        // System SNR band center, plus per-clip jitter.
        let center = SNR_LO + (SNR_HI - SNR_LO) * system as f64 / (spec.n_systems - 1).max(1) as f64;
        let snr_db = (center + 3.0 * (rng.random::<f64>() * 2.0 - 1.0)).clamp(SNR_LO, SNR_HI);

        // Three tones, log-uniform in [220, 3500] Hz.
        let mut samples = vec![0.0f32; n_samples];
        for _ in 0..3 {
            let f = 220.0 * (3500.0f64 / 220.0).powf(rng.random::<f64>());
            let amp = 0.05 + 0.05 * rng.random::<f64>();
            let phase = TAU * rng.random::<f64>();
            for (t, s) in samples.iter_mut().enumerate() {
                *s += (amp * (TAU * f * t as f64 / f64::from(spec.sample_rate) + phase).sin())
                    as f32;
            }
        }
        let p_signal = samples.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>()
            / n_samples as f64;
        let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
        for s in samples.iter_mut() {
            *s = (*s + (sigma * gaussian(&mut rng)) as f32).clamp(-1.0, 1.0);
        }

        let planted_mi = (mos_of_snr(snr_db) + 0.2 * gaussian(&mut rng)).clamp(1.0, 5.0);
        let planted_ta = (mos_of_snr(snr_db) + 0.2 * gaussian(&mut rng)).clamp(1.0, 5.0);

        out.push(SynthClip {
            annotation: ClipAnnotation {
                clip_id: clip_id.clone(),
                audio_path: format!("audio/{clip_id}.wav"),
                system_id,
                prompt_text: Some(format!("tone mixture at {snr_db:.1} dB SNR")),
                ratings_mi: ratings_for(planted_mi),
                ratings_ta: ratings_for(planted_ta),
            },
            clip: AudioClip::new(samples, spec.sample_rate, clip_id),
            snr_db,
            planted_mi,
            planted_ta,
        });
    }
    out
}

/// Writes WAVs plus a manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let clips = generate(spec);
    for c in &clips {
        crate::audio::write_wav(&dir.join(&c.annotation.audio_path), &c.clip)?;
    }
    let manifest = dir.join("manifest.csv");
    let annotations: Vec<ClipAnnotation> = clips.into_iter().map(|c| c.annotation).collect();
    crate::manifest::write_manifest(&manifest, &annotations)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clef_core::dataset::{aggregate_targets, validate_annotations};

    #[test]
    fn ratings_mean_matches_planted_to_a_fifth() {
        for y in [1.0, 1.1, 2.49, 3.0, 3.97, 4.6, 5.0] {
            let r = ratings_for(y);
            assert_eq!(r.len(), 5);
            assert!(r.iter().all(|&v| (1..=5).contains(&v)));
            let mean = r.iter().map(|&v| f64::from(v)).sum::<f64>() / 5.0;
            assert!((mean - y).abs() <= 0.1 + 1e-9, "y={y} mean={mean}");
        }
    }

    #[test]
    fn dataset_is_valid_and_deterministic() {
        let spec = SynthSpec {
            n_clips: 40,
            n_systems: 5,
            seconds: 1.0,
            ..SynthSpec::default()
        };
        let a = generate(&spec);
        let b = generate(&spec);
        let anns: Vec<ClipAnnotation> = a.iter().map(|c| c.annotation.clone()).collect();
        validate_annotations(&anns).unwrap();
        assert_eq!(anns.len(), 40);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip.samples, y.clip.samples);
            assert_eq!(x.annotation, y.annotation);
        }
    }

    #[test]
    fn mos_tracks_snr() {
        let spec = SynthSpec {
            n_clips: 100,
            n_systems: 10,
            seconds: 0.5,
            ..SynthSpec::default()
        };
        let clips = generate(&spec);
        let anns: Vec<ClipAnnotation> = clips.iter().map(|c| c.annotation.clone()).collect();
        let targets = aggregate_targets(&anns).unwrap();
        let snr: Vec<f64> = clips.iter().map(|c| c.snr_db).collect();
        let mi: Vec<f64> = targets.iter().map(|t| t.mi).collect();
        let r = clef_core::stats::pearson(&snr, &mi).unwrap();
        assert!(r > 0.95, "SNR-MOS correlation {r}");
    }

    #[test]
    fn write_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_clips: 6,
            n_systems: 3,
            seconds: 0.5,
            ..SynthSpec::default()
        };
        let manifest = write_dataset(dir.path(), &spec).unwrap();
        let anns = crate::manifest::load_manifest(&manifest).unwrap();
        assert_eq!(anns.len(), 6);
        assert!(crate::manifest::missing_audio(&manifest, &anns).is_empty());
    }
}
