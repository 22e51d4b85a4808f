//! Deterministic toy encoder for tests and the synthetic end-to-end pipeline.
//!
//! `toy_extract` produces 50 Hz, d = 64 features from log band energies plus
//! a fixed seeded random projection; it carries enough signal that clips at
//! different SNRs are linearly separable. `ToyAttentionEncoder` stacks a few
//! self-attention layers on top, exposing Q/K/V/O projection weights so the
//! LoRA and full fine-tuning paths have a real (small) adaptation target.

use crate::audio::AudioClip;
use crate::error::CoreError;
use crate::features::{EncoderSpec, FeatureMatrix};
use crate::linalg::{softmax_in_place, Mat};
use crate::model::Projection;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOY_SAMPLE_RATE: u32 = 24_000;
const TOY_FRAME_RATE: usize = 50;
const N_BANDS: usize = 32;
const TOY_DIM: usize = 64;
/// Fixed seed for the toy random projection; part of the toy contract.
const TOY_PROJECTION_SEED: u64 = 0xC1EF_0001;

fn mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (crate::math::powf(10.0, m / 2595.0) - 1.0)
}

/// Mel-spaced analysis frequencies between 50 Hz and 11 kHz.
fn band_frequencies() -> [f64; N_BANDS] {
    let lo = mel(50.0);
    let hi = mel(11_000.0);
    let mut out = [0.0; N_BANDS];
    for (i, slot) in out.iter_mut().enumerate() {
        let m = lo + (hi - lo) * i as f64 / (N_BANDS - 1) as f64;
        *slot = mel_inv(m);
    }
    out
}

/// Goertzel power of `frame` at normalized frequency `freq` (Hz).
fn goertzel_power(frame: &[f32], freq: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * core::f64::consts::PI * freq / sample_rate;
    let coeff = 2.0 * libm::cos(w);
    let mut s_prev = 0.0f64;
    let mut s_prev2 = 0.0f64;
    for &x in frame {
        let s = f64::from(x) + coeff * s_prev - s_prev2;
        s_prev2 = s_prev;
        s_prev = s;
    }
    let power = s_prev * s_prev + s_prev2 * s_prev2 - coeff * s_prev * s_prev2;
    power / (frame.len() as f64 * frame.len() as f64)
}

/// The fixed seeded projection mixing band energies into the second half of
/// the feature vector.
fn projection_matrix() -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_PROJECTION_SEED);
    let scale = 1.0 / libm::sqrtf(N_BANDS as f32);
    let mut data = Vec::with_capacity(N_BANDS * N_BANDS);
    for _ in 0..N_BANDS * N_BANDS {
        data.push((rng.random::<f32>() * 2.0 - 1.0) * scale);
    }
    Mat::from_vec(N_BANDS, N_BANDS, data)
}

/// Deterministic 50 Hz, d = 64 toy features: per-frame log band energies
/// followed by their fixed random projection.
pub fn toy_extract(clip: &AudioClip) -> Result<FeatureMatrix, CoreError> {
    if clip.sample_rate != TOY_SAMPLE_RATE {
        return Err(CoreError::InvalidInput(format!(
            "toy encoder expects {TOY_SAMPLE_RATE} Hz input, got {}",
            clip.sample_rate
        )));
    }
    let hop = TOY_SAMPLE_RATE as usize / TOY_FRAME_RATE;
    let n_frames = clip.samples.len() / hop;
    if n_frames == 0 {
        return Err(CoreError::InvalidInput(
            "clip shorter than one toy frame".into(),
        ));
    }

    let freqs = band_frequencies();
    let proj = projection_matrix();
    let mut frames = Mat::zeros(n_frames, TOY_DIM);
    let mut bands = [0.0f32; N_BANDS];
    for l in 0..n_frames {
        let window = &clip.samples[l * hop..(l + 1) * hop];
        for (b, &f) in freqs.iter().enumerate() {
            let p = goertzel_power(window, f, f64::from(TOY_SAMPLE_RATE));
            bands[b] = libm::log10(p + 1e-10) as f32;
        }
        let mixed = proj.matvec(&bands);
        let row = frames.row_mut(l);
        row[..N_BANDS].copy_from_slice(&bands);
        row[N_BANDS..].copy_from_slice(&mixed);
    }

    Ok(FeatureMatrix {
        frames,
        frame_rate: TOY_FRAME_RATE as f32,
        encoder_id: String::from("toy"),
        clip_id: clip.clip_id.clone(),
    })
}

/// Per-layer attention projection weights (either the frozen base or an
/// adapted effective set).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl LayerWeights {
    pub fn get(&self, p: Projection) -> &Mat {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
        }
    }

    pub fn get_mut(&mut self, p: Projection) -> &mut Mat {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
        }
    }
}

/// Gradients with respect to one layer's effective projection weights.
pub type LayerGrads = LayerWeights;

/// Intermediate activations of one attention layer, kept for backprop.
pub struct LayerCache {
    h_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    ctx: Mat,
}

/// A small frozen self-attention stack over toy features.
///
/// Each layer computes `H + softmax(Q K^T / sqrt(d)) V Wo^T` with
/// `Q = H Wq^T` etc. Base weights are seeded and never mutated; adapted
/// forward passes take a separate effective weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionEncoder {
    dim: usize,
    layers: Vec<LayerWeights>,
    encoder_id: String,
}

impl ToyAttentionEncoder {
    /// Seeded construction. `n_layers = 2`, `dim = 64` matches the
    /// `toy-attn` encoder spec.
    pub fn new(n_layers: usize, dim: usize, seed: u64, encoder_id: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.3 / libm::sqrtf(dim as f32);
        let mk = |rng: &mut ChaCha8Rng| {
            let data = (0..dim * dim)
                .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
                .collect();
            Mat::from_vec(dim, dim, data)
        };
        let layers = (0..n_layers)
            .map(|_| LayerWeights {
                wq: mk(&mut rng),
                wk: mk(&mut rng),
                wv: mk(&mut rng),
                wo: mk(&mut rng),
            })
            .collect();
        ToyAttentionEncoder {
            dim,
            layers,
            encoder_id: String::from(encoder_id),
        }
    }

    /// The standard test encoder behind `EncoderSpec::toy_attn()`.
    pub fn standard() -> Self {
        Self::new(2, TOY_DIM, 0xC1EF_0002, "toy-attn")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_weights(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Forward pass with the given effective weights (pass
    /// [`Self::layer_weights`] for the frozen path).
    pub fn forward(&self, base: &Mat, weights: &[LayerWeights]) -> Mat {
        self.forward_cached(base, weights).0
    }

    /// Forward pass keeping the per-layer activations needed by
    /// [`Self::backward`].
    pub fn forward_cached(&self, base: &Mat, weights: &[LayerWeights]) -> (Mat, Vec<LayerCache>) {
        assert_eq!(base.cols(), self.dim, "feature dim mismatch");
        assert_eq!(weights.len(), self.layers.len(), "layer count mismatch");
        let inv_sqrt_d = 1.0 / libm::sqrtf(self.dim as f32);
        let mut h = base.clone();
        let mut caches = Vec::with_capacity(weights.len());
        for w in weights {
            let q = h.matmul_bt(&w.wq);
            let k = h.matmul_bt(&w.wk);
            let v = h.matmul_bt(&w.wv);
            let mut attn = q.matmul_bt(&k);
            attn.scale(inv_sqrt_d);
            for r in 0..attn.rows() {
                softmax_in_place(attn.row_mut(r));
            }
            let ctx = attn.matmul(&v);
            let mut out = h.clone();
            let proj = ctx.matmul_bt(&w.wo);
            out.add_scaled(&proj, 1.0);
            caches.push(LayerCache {
                h_in: h,
                q,
                k,
                v,
                attn,
                ctx,
            });
            h = out;
        }
        (h, caches)
    }

    /// Backprop through the stack: returns per-layer gradients with respect
    /// to the effective projection weights, plus the gradient on the base
    /// features.
    pub fn backward(
        &self,
        d_out: &Mat,
        caches: &[LayerCache],
        weights: &[LayerWeights],
    ) -> (Vec<LayerGrads>, Mat) {
        let inv_sqrt_d = 1.0 / libm::sqrtf(self.dim as f32);
        let mut d_h = d_out.clone();
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(caches.len());
        for (cache, w) in caches.iter().zip(weights.iter()).rev() {
            // out = h_in + ctx Wo^T
            let d_wo = d_h.matmul_at(&cache.ctx); // (d x d): dOut^T ctx
            let d_ctx = d_h.matmul(&w.wo);
            // ctx = attn v
            let d_attn = d_ctx.matmul_bt(&cache.v);
            let d_v = cache.attn.matmul_at(&d_ctx);
            // softmax backward, row-wise
            let mut d_scores = Mat::zeros(d_attn.rows(), d_attn.cols());
            for r in 0..d_attn.rows() {
                let a = cache.attn.row(r);
                let da = d_attn.row(r);
                let dot: f32 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
                let ds = d_scores.row_mut(r);
                for c in 0..a.len() {
                    ds[c] = a[c] * (da[c] - dot);
                }
            }
            d_scores.scale(inv_sqrt_d);
            // scores = q k^T
            let d_q = d_scores.matmul(&cache.k);
            let d_k = d_scores.matmul_at(&cache.q);
            // q = h Wq^T etc.
            let d_wq = d_q.matmul_at(&cache.h_in);
            let d_wk = d_k.matmul_at(&cache.h_in);
            let d_wv = d_v.matmul_at(&cache.h_in);
            let mut d_h_in = d_h.clone(); // residual path
            d_h_in.add_scaled(&d_q.matmul(&w.wq), 1.0);
            d_h_in.add_scaled(&d_k.matmul(&w.wk), 1.0);
            d_h_in.add_scaled(&d_v.matmul(&w.wv), 1.0);
            grads.push(LayerGrads {
                wq: d_wq,
                wk: d_wk,
                wv: d_wv,
                wo: d_wo,
            });
            d_h = d_h_in;
        }
        grads.reverse();
        (grads, d_h)
    }

    /// Extract toy-attn features: toy base features pushed through the
    /// frozen stack.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix, CoreError> {
        let base = toy_extract(clip)?;
        let frames = self.forward(&base.frames, &self.layers);
        Ok(FeatureMatrix {
            frames,
            frame_rate: base.frame_rate,
            encoder_id: self.encoder_id.clone(),
            clip_id: base.clip_id,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            encoder_id: self.encoder_id.clone(),
            hidden_dim: self.dim,
            frame_rate: TOY_FRAME_RATE as f32,
            layer: self.layers.len() as u32,
            adaptable: true,
        }
    }
}
