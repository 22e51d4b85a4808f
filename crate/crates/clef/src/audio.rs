//! Audio decode, resample, and length normalization.
//!
//! Decoding goes through symphonia (WAV/FLAC/MP3), resampling through
//! rubato's FFT-based synchronous resampler, and WAV output through hound.

use anyhow::{anyhow, bail, Context, Result};
use clef_core::audio::AudioClip;
use rubato::{FftFixedIn, Resampler};
use std::fs::File;
use std::path::Path;
use symphonia::core::audio::SampleBuffer;
use symphonia::core::codecs::DecoderOptions;
use symphonia::core::formats::FormatOptions;
use symphonia::core::io::MediaSourceStream;
use symphonia::core::meta::MetadataOptions;
use symphonia::core::probe::Hint;

/// Decoded mono audio before rate/length normalization.
pub struct RawAudio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Decodes a WAV/FLAC/MP3 file and downmixes to mono by channel mean.
pub fn decode(path: &Path) -> Result<RawAudio> {
    let file = File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mss = MediaSourceStream::new(Box::new(file), Default::default());
    let mut hint = Hint::new();
    if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
        hint.with_extension(ext);
    }
    let probed = symphonia::default::get_probe()
        .format(
            &hint,
            mss,
            &FormatOptions::default(),
            &MetadataOptions::default(),
        )
        .with_context(|| format!("decode {}: unrecognized format", path.display()))?;
    let mut format = probed.format;
    let track = format
        .default_track()
        .ok_or_else(|| anyhow!("decode {}: no audio track", path.display()))?;
    let track_id = track.id;
    let mut decoder = symphonia::default::get_codecs()
        .make(&track.codec_params, &DecoderOptions::default())
        .with_context(|| format!("decode {}: unsupported codec", path.display()))?;

    let mut sample_rate = 0u32;
    let mut mono: Vec<f32> = Vec::new();
    loop {
        let packet = match format.next_packet() {
            Ok(p) => p,
            Err(symphonia::core::errors::Error::IoError(e))
                if e.kind() == std::io::ErrorKind::UnexpectedEof =>
            {
                break
            }
            Err(symphonia::core::errors::Error::ResetRequired) => break,
            Err(e) => return Err(anyhow!("decode {}: {e}", path.display())),
        };
        if packet.track_id() != track_id {
            continue;
        }
        let decoded = match decoder.decode(&packet) {
            Ok(d) => d,
            // A corrupt frame mid-stream is tolerated; a fully undecodable
            // file surfaces as zero-length below.
            Err(symphonia::core::errors::Error::DecodeError(_)) => continue,
            Err(e) => return Err(anyhow!("decode {}: {e}", path.display())),
        };
        let spec = *decoded.spec();
        sample_rate = spec.rate;
        let channels = spec.channels.count();
        let mut buf = SampleBuffer::<f32>::new(decoded.capacity() as u64, spec);
        buf.copy_interleaved_ref(decoded);
        let inter = buf.samples();
        for frame in inter.chunks_exact(channels.max(1)) {
            mono.push(frame.iter().sum::<f32>() / channels.max(1) as f32);
        }
    }
    if mono.is_empty() || sample_rate == 0 {
        bail!("decode {}: no audio samples", path.display());
    }
    Ok(RawAudio {
        samples: mono,
        sample_rate,
    })
}

/// Band-limited resampling of a mono signal from `from` Hz to `to` Hz.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        bail!("resample: zero sample rate");
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    const CHUNK: usize = 1024;
    let mut rs = FftFixedIn::<f32>::new(from as usize, to as usize, CHUNK, 2, 1)
        .map_err(|e| anyhow!("resampler construction: {e}"))?;
    let expected = (samples.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    let delay = rs.output_delay();
    let mut out: Vec<f32> = Vec::with_capacity(expected + delay);
    let mut pos = 0usize;
    // Feed trailing zeros so the filter delay is flushed through.
    let padded_len = samples.len() + CHUNK * (1 + delay * from as usize / (to as usize * CHUNK));
    let mut chunk = vec![0.0f32; CHUNK];
    while pos < padded_len && out.len() < expected + delay {
        for (i, c) in chunk.iter_mut().enumerate() {
            *c = samples.get(pos + i).copied().unwrap_or(0.0);
        }
        let res = rs
            .process(&[&chunk], None)
            .map_err(|e| anyhow!("resample: {e}"))?;
        out.extend_from_slice(&res[0]);
        pos += CHUNK;
    }
    if out.len() < delay {
        bail!("resample: output shorter than filter delay");
    }
    out.drain(..delay);
    out.truncate(expected);
    // Short inputs can underrun the expected length; pad with silence.
    out.resize(expected, 0.0);
    Ok(out)
}

/// Trims or zero-pads `samples` to exactly `len`.
pub fn fix_length(mut samples: Vec<f32>, len: usize) -> Vec<f32> {
    samples.resize(len, 0.0);
    samples
}

/// Clamps every sample into [-1, 1].
pub fn clamp_samples(samples: &mut [f32]) {
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
}

/// Decodes `path`, downmixes to mono, resamples to `target_rate`, and
/// truncates/zero-pads to exactly `target_rate * target_seconds` samples.
pub fn load_and_normalize(
    path: &Path,
    target_rate: u32,
    target_seconds: f64,
    clip_id: &str,
) -> Result<AudioClip> {
    let raw = decode(path)?;
    normalize(raw, target_rate, target_seconds, clip_id)
}

/// Rate/length normalization of already-decoded mono audio.
pub fn normalize(
    raw: RawAudio,
    target_rate: u32,
    target_seconds: f64,
    clip_id: &str,
) -> Result<AudioClip> {
    let resampled = resample(&raw.samples, raw.sample_rate, target_rate)?;
    let len = (f64::from(target_rate) * target_seconds).round() as usize;
    let mut samples = fix_length(resampled, len);
    clamp_samples(&mut samples);
    let clip = AudioClip::new(samples, target_rate, clip_id);
    clip.validate().map_err(|e| anyhow!("{clip_id}: {e}"))?;
    Ok(clip)
}

/// Writes a mono clip as 16-bit PCM WAV, creating parent directories.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .with_context(|| format!("write {}", path.display()))?;
    for &s in &clip.samples {
        let v = (f64::from(s.clamp(-1.0, 1.0)) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
