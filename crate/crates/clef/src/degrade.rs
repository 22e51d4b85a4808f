//! Controlled degradations: MP3 round trip, additive Gaussian noise at a
//! target SNR, pitch shift, and tempo stretch.
//!
//! Every transform preserves the input's length and sample rate and clamps
//! the result into [-1, 1]. Identical (clip, spec, seed) inputs give
//! identical outputs: all randomness is drawn from a ChaCha8 stream keyed by
//! (seed, clip id, kind, severity).

use anyhow::{anyhow, bail, Result};
use clef_core::audio::{AudioClip, DegradationKind, DegradationSpec};
use clef_core::{derive_seed, hash_str};
use mp3lame_encoder::{Bitrate, Builder, FlushNoGap, MonoPcm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::audio::{clamp_samples, fix_length, resample};

/// Location of one degraded clip inside the mirrored output tree.
pub fn degraded_path(root: &Path, spec: &DegradationSpec, clip_id: &str) -> PathBuf {
    root.join("degraded")
        .join(spec.kind.as_str())
        .join(spec.severity.as_str())
        .join(format!("{clip_id}.wav"))
}

fn cell_rng(clip_id: &str, spec: &DegradationSpec, seed: u64) -> ChaCha8Rng {
    let cell = (spec.kind as u64) * 8 + spec.severity as u64 + 1;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, hash_str(clip_id) ^ cell))
}

/// Applies one degradation. Identity specs (SNR = +inf, 0 semitones,
/// ratio 1) return the input unchanged; the concordance harness rejects them
/// separately.
pub fn apply_degradation(
    clip: &AudioClip,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<AudioClip> {
    spec.validate().map_err(|e| anyhow!("{e}"))?;
    clip.validate().map_err(|e| anyhow!("{e}"))?;
    if spec.is_identity() {
        return Ok(clip.clone());
    }
    let mut rng = cell_rng(&clip.clip_id, spec, seed);
    let mut samples = match spec.kind {
        DegradationKind::Noise => add_noise(&clip.samples, spec.parameter, &mut rng)?,
        DegradationKind::Mp3 => mp3_round_trip(&clip.samples, clip.sample_rate, spec.parameter)?,
        DegradationKind::Pitch => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pitch_shift(&clip.samples, sign * spec.parameter)
        }
        DegradationKind::Tempo => {
            let speed = if rng.random::<bool>() {
                spec.parameter
            } else {
                1.0 / spec.parameter
            };
            wsola(&clip.samples, speed)
        }
    };
    samples = fix_length(samples, clip.samples.len());
    clamp_samples(&mut samples);
    Ok(AudioClip::new(samples, clip.sample_rate, clip.clip_id.clone()))
}

/// White Gaussian noise scaled so the measured SNR hits `snr_db`.
fn add_noise(x: &[f32], snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let p_signal = x.iter().map(|&s| f64::from(s) * f64::from(s)).sum::<f64>() / x.len() as f64;
    if p_signal <= 0.0 {
        bail!("noise degradation undefined on a silent clip");
    }
    let sigma = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    // Box-Muller pairs keep the draw order stable across platforms.
    let mut out = Vec::with_capacity(x.len());
    let mut i = 0;
    while i < x.len() {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        for g in [r * c, r * s] {
            if i < x.len() {
                out.push(x[i] + (sigma * g) as f32);
                i += 1;
            }
        }
    }
    Ok(out)
}

fn lame_bitrate(kbps: f64) -> Result<Bitrate> {
    Ok(match kbps as u32 {
        8 => Bitrate::Kbps8,
        16 => Bitrate::Kbps16,
        24 => Bitrate::Kbps24,
        32 => Bitrate::Kbps32,
        40 => Bitrate::Kbps40,
        48 => Bitrate::Kbps48,
        64 => Bitrate::Kbps64,
        80 => Bitrate::Kbps80,
        96 => Bitrate::Kbps96,
        112 => Bitrate::Kbps112,
        128 => Bitrate::Kbps128,
        160 => Bitrate::Kbps160,
        192 => Bitrate::Kbps192,
        224 => Bitrate::Kbps224,
        256 => Bitrate::Kbps256,
        320 => Bitrate::Kbps320,
        other => bail!("unsupported mp3 bitrate {other} kbps"),
    })
}

/// Encode-decode through LAME + minimp3 at the given bitrate, realigned to
/// the input. At very low bitrates LAME resamples internally (32 kbps mono
/// comes back at 22.05 kHz); the decode path resamples back.
fn mp3_round_trip(x: &[f32], sample_rate: u32, kbps: f64) -> Result<Vec<f32>> {
    let mut builder =
        Builder::new().ok_or_else(|| anyhow!("mp3 encoder initialization failed"))?;
    builder
        .set_sample_rate(sample_rate)
        .map_err(|e| anyhow!("mp3 encoder: {e}"))?;
    builder
        .set_num_channels(1)
        .map_err(|e| anyhow!("mp3 encoder: {e}"))?;
    builder
        .set_brate(lame_bitrate(kbps)?)
        .map_err(|e| anyhow!("mp3 encoder: {e}"))?;
    builder
        .set_quality(mp3lame_encoder::Quality::Good)
        .map_err(|e| anyhow!("mp3 encoder: {e}"))?;
    let mut enc = builder.build().map_err(|e| anyhow!("mp3 encoder: {e}"))?;

    // encode_to_vec writes into spare capacity only; reserve the encoder's
    // worst-case size up front, plus one frame for the flush.
    let mut bytes = Vec::with_capacity(mp3lame_encoder::max_required_buffer_size(x.len()));
    enc.encode_to_vec(MonoPcm(x), &mut bytes)
        .map_err(|e| anyhow!("mp3 encode: {e}"))?;
    bytes.reserve(7200);
    enc.flush_to_vec::<FlushNoGap>(&mut bytes)
        .map_err(|e| anyhow!("mp3 flush: {e}"))?;

    let mut dec = minimp3::Decoder::new(std::io::Cursor::new(bytes));
    let mut decoded: Vec<f32> = Vec::with_capacity(x.len() + 4096);
    let mut dec_rate = sample_rate;
    loop {
        match dec.next_frame() {
            Ok(frame) => {
                dec_rate = frame.sample_rate as u32;
                let ch = frame.channels.max(1);
                for f in frame.data.chunks_exact(ch) {
                    let sum: i32 = f.iter().map(|&v| i32::from(v)).sum();
                    decoded.push(sum as f32 / (ch as f32 * 32768.0));
                }
            }
            Err(minimp3::Error::Eof) => break,
            Err(e) => bail!("mp3 decode: {e}"),
        }
    }
    if decoded.is_empty() {
        bail!("mp3 decode produced no samples");
    }
    if dec_rate != sample_rate {
        decoded = resample(&decoded, dec_rate, sample_rate)?;
    }
    Ok(align_to(x, &decoded))
}

/// Shifts `y` by the lag (0..4000) that best matches `x` at the head, then
/// trims/pads to x's length. Codec delay is a few hundred samples; the
/// search window leaves ample slack.
fn align_to(x: &[f32], y: &[f32]) -> Vec<f32> {
    let probe = x.len().min(8000);
    let max_lag = 4000.min(y.len().saturating_sub(probe));
    let mut best_lag = 0usize;
    let mut best = f64::NEG_INFINITY;
    for lag in 0..=max_lag {
        let mut c = 0.0f64;
        for i in 0..probe {
            c += f64::from(x[i]) * f64::from(y[lag + i]);
        }
        if c > best {
            best = c;
            best_lag = lag;
        }
    }
    fix_length(y[best_lag..].to_vec(), x.len())
}

// ---- WSOLA time stretching ----------------------------------------------

const WSOLA_WIN: usize = 1024;
const WSOLA_HOP: usize = 512;
const WSOLA_TOL: isize = 256;

fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 * (1.0 - t.cos())) as f32
        })
        .collect()
}

/// Waveform-similarity overlap-add time stretch. `speed > 1` plays faster
/// (shorter output), `speed < 1` slower. Pitch is preserved.
pub fn wsola(x: &[f32], speed: f64) -> Vec<f32> {
    assert!(speed > 0.0, "speed must be positive");
    if x.len() <= WSOLA_WIN * 2 {
        // Too short for overlap-add; fall back to linear resampling.
        return linear_stretch(x, speed);
    }
    let out_len = (x.len() as f64 / speed).round() as usize;
    let win = hann(WSOLA_WIN);
    let mut out = vec![0.0f32; out_len + WSOLA_WIN];
    let mut norm = vec![0.0f32; out_len + WSOLA_WIN];
    let max_start = x.len() - WSOLA_WIN;

    let mut prev_start = 0usize;
    let mut frame = 0usize;
    loop {
        let out_pos = frame * WSOLA_HOP;
        if out_pos >= out_len {
            break;
        }
        let start = if frame == 0 {
            0
        } else {
            // Natural continuation of the previous copy vs. the analysis
            // target dictated by the stretch factor.
            let natural = (prev_start + WSOLA_HOP).min(max_start);
            let target = (out_pos as f64 * speed).round() as isize;
            let lo = (target - WSOLA_TOL).clamp(0, max_start as isize);
            let hi = (target + WSOLA_TOL).clamp(0, max_start as isize);
            let mut best_start = lo as usize;
            let mut best = f64::NEG_INFINITY;
            for cand in lo..=hi {
                let c = cand as usize;
                let mut dot = 0.0f64;
                for i in (0..WSOLA_WIN).step_by(4) {
                    dot += f64::from(x[natural + i]) * f64::from(x[c + i]);
                }
                if dot > best {
                    best = dot;
                    best_start = c;
                }
            }
            best_start
        };
        for i in 0..WSOLA_WIN {
            out[out_pos + i] += x[start + i] * win[i];
            norm[out_pos + i] += win[i];
        }
        prev_start = start;
        frame += 1;
    }
    for (o, &n) in out.iter_mut().zip(norm.iter()) {
        if n > 1e-3 {
            *o /= n;
        }
    }
    out.truncate(out_len);
    out
}

/// Linear-interpolation resample by a rate factor (reads input at `step`).
fn linear_stretch(x: &[f32], step: f64) -> Vec<f32> {
    let out_len = (x.len() as f64 / step).round().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos as usize;
            if j + 1 < x.len() {
                let frac = (pos - j as f64) as f32;
                x[j] * (1.0 - frac) + x[j + 1] * frac
            } else {
                *x.last().unwrap_or(&0.0)
            }
        })
        .collect()
}

/// Pitch shift by `semitones` (positive = up) with duration preserved:
/// WSOLA stretch by 2^(s/12), then resample-read back to the input length.
pub fn pitch_shift(x: &[f32], semitones: f64) -> Vec<f32> {
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = wsola(x, 1.0 / factor);
    let resampled = linear_stretch(&stretched, factor);
    fix_length(resampled, x.len())
}

/// Degradation as the concordance harness applies it: identity specs are
/// refused because original-vs-original pairs carry no signal.
pub fn degrade_for_cell(
    clip: &AudioClip,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<AudioClip> {
    if spec.is_identity() {
        bail!(
            "identity degradation spec ({} {} parameter {}) is not a valid concordance cell",
            spec.kind.as_str(),
            spec.severity.as_str(),
            spec.parameter
        );
    }
    apply_degradation(clip, spec, seed)
}

/// Degrades a clip and writes it into `degraded/<kind>/<severity>/` under
/// `root`. Returns the degraded clip for immediate scoring.
pub fn degrade_and_write(
    clip: &AudioClip,
    spec: &DegradationSpec,
    seed: u64,
    root: &Path,
) -> Result<AudioClip> {
    let degraded = degrade_for_cell(clip, spec, seed)?;
    crate::audio::write_wav(&degraded_path(root, spec, &clip.clip_id), &degraded)?;
    Ok(degraded)
}
