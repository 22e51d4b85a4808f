//! Optimization loop: decoupled-weight-decay Adam over two parameter groups,
//! global-norm gradient clipping, contrastive warm start, and early stopping
//! on validation SRCC of the MI head.
//!
//! Adaptable modes (LoRA, full fine-tune) run the toy attention stack inside
//! the loop; frozen modes consume cached encoder features directly.

use crate::dataset::{FoldSplit, MosTarget};
use crate::error::CoreError;
use crate::features::{EncoderSpec, FeatureStore};
use crate::linalg::{softmax_in_place, Mat};
use crate::model::{
    apply_lora, head_backward, head_forward, pool_backward, pool_forward, Dimension, HeadCache,
    HeadMode, PoolCache, Projection, QualityModel, LORA_ALPHA, LORA_RANK,
};
use crate::objectives::{
    combine, contrastive_loss, mse_loss, ordinal_loss, soft_targets, ContrastiveConfig,
    OrdinalTargetConfig, TrainMode, UncertaintyState,
};
pub use crate::objectives::{epoch_schedule, ActiveComponents};
use crate::stats::spearman;
use crate::toy::{LayerGrads, LayerWeights, ToyAttentionEncoder};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Numeric precision of the training loop. Only f32 is implemented; the
/// mixed variant exists so configs naming it fail loudly instead of silently
/// running in a different mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    MixedBf16,
}

/// Full training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub lr_heads: f64,
    pub lr_lora: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub patience: u32,
    pub grad_clip_norm: f64,
    pub weight_decay_heads: f64,
    pub weight_decay_lora: f64,
    pub precision: Precision,
    pub ordinal: OrdinalTargetConfig,
    pub contrastive: ContrastiveConfig,
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            seed,
            lr_heads: 3e-4,
            lr_lora: 1e-5,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            grad_clip_norm: 1.0,
            weight_decay_heads: 0.01,
            weight_decay_lora: 0.0,
            precision: Precision::F32,
            ordinal: OrdinalTargetConfig::default(),
            contrastive: ContrastiveConfig::default(),
            lora_rank: LORA_RANK,
            lora_alpha: LORA_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.lr_heads <= 0.0 || self.lr_lora <= 0.0 {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(CoreError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(CoreError::Config("grad_clip_norm must be positive".into()));
        }
        if self.precision == Precision::MixedBf16 {
            return Err(CoreError::Config(
                "mixed-bf16 precision is not implemented; use f32".into(),
            ));
        }
        self.ordinal.validate()?;
        self.contrastive.validate()
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    /// NaN when the correlation was undefined (e.g. constant predictions).
    pub val_srcc_mi: f64,
    pub val_srcc_ta: f64,
    pub lr_heads: f64,
    pub lr_lora: f64,
    /// Largest post-clip global gradient norm seen this epoch.
    pub grad_norm_max: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: u32,
    pub stop_reason: StopReason,
}

/// What the feature store holds and whether the encoder trains.
pub enum EncoderInput<'a> {
    /// Store yields final frozen-encoder features.
    Frozen(EncoderSpec),
    /// Store yields base features; the attention stack runs in the loop.
    Adaptable(&'a ToyAttentionEncoder),
}

impl EncoderInput<'_> {
    /// A fresh borrow usable for another training run.
    pub fn reborrow(&self) -> EncoderInput<'_> {
        match self {
            EncoderInput::Frozen(s) => EncoderInput::Frozen(s.clone()),
            EncoderInput::Adaptable(e) => EncoderInput::Adaptable(e),
        }
    }

    fn spec(&self) -> EncoderSpec {
        match self {
            EncoderInput::Frozen(s) => s.clone(),
            EncoderInput::Adaptable(e) => e.spec(),
        }
    }
}

/// Everything `train` produces besides the log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: QualityModel,
    pub unc: Option<UncertaintyState>,
    /// Fine-tuned encoder weights (A4 only); LoRA deltas live in the model.
    pub encoder_weights: Option<Vec<LayerWeights>>,
    pub mode: TrainMode,
}

impl TrainedModel {
    /// Whether `predict_clip` needs the attention encoder (and base features
    /// rather than final ones).
    pub fn needs_encoder(&self) -> bool {
        self.mode.uses_lora() || self.mode.full_finetune()
    }

    /// Effective attention weights for inference.
    pub fn effective_weights(
        &self,
        encoder: &ToyAttentionEncoder,
    ) -> Result<Vec<LayerWeights>, CoreError> {
        if let Some(w) = &self.encoder_weights {
            Ok(w.clone())
        } else if let Some(lora) = &self.model.lora {
            apply_lora(encoder, lora)
        } else {
            Ok(encoder.layer_weights().to_vec())
        }
    }

    /// Decoded (unclamped) scores for one clip. `frames` are base features
    /// for adaptable modes, final features otherwise.
    pub fn predict_clip(
        &self,
        encoder: Option<&ToyAttentionEncoder>,
        frames: &Mat,
    ) -> Result<BTreeMap<Dimension, f64>, CoreError> {
        if self.needs_encoder() {
            let enc = encoder.ok_or_else(|| {
                CoreError::Config(format!(
                    "mode {} needs the attention encoder for inference",
                    self.mode.as_str()
                ))
            })?;
            let eff = self.effective_weights(enc)?;
            let feat = enc.forward(frames, &eff);
            self.model.predict(&feat)
        } else {
            self.model.predict(frames)
        }
    }
}

// ---- gradient container ------------------------------------------------

struct HeadGradAcc {
    w1: Mat,
    b1: Vec<f32>,
    w2: Mat,
    b2: Vec<f32>,
}

struct Grads {
    pool: Vec<f32>,
    heads: BTreeMap<Dimension, HeadGradAcc>,
    lora: BTreeMap<(u32, Projection), (Mat, Mat)>,
    unc_s: Option<Vec<f32>>,
    enc: Option<Vec<LayerGrads>>,
}

struct State {
    model: QualityModel,
    /// s_h = log sigma_h^2 in head order (A3c only).
    unc_s: Option<Vec<f32>>,
    enc_weights: Option<Vec<LayerWeights>>,
}

impl Grads {
    fn zeros_like(state: &State) -> Self {
        let heads = state
            .model
            .heads
            .iter()
            .map(|(dim, h)| {
                (
                    *dim,
                    HeadGradAcc {
                        w1: Mat::zeros(h.w1.rows(), h.w1.cols()),
                        b1: vec![0.0; h.b1.len()],
                        w2: Mat::zeros(h.w2.rows(), h.w2.cols()),
                        b2: vec![0.0; h.b2.len()],
                    },
                )
            })
            .collect();
        let lora = state.model.lora.as_ref().map_or_else(BTreeMap::new, |l| {
            l.pairs
                .iter()
                .map(|(k, p)| {
                    (
                        *k,
                        (
                            Mat::zeros(p.a.rows(), p.a.cols()),
                            Mat::zeros(p.b.rows(), p.b.cols()),
                        ),
                    )
                })
                .collect()
        });
        let enc = state.enc_weights.as_ref().map(|ws| {
            ws.iter()
                .map(|w| LayerGrads {
                    wq: Mat::zeros(w.wq.rows(), w.wq.cols()),
                    wk: Mat::zeros(w.wk.rows(), w.wk.cols()),
                    wv: Mat::zeros(w.wv.rows(), w.wv.cols()),
                    wo: Mat::zeros(w.wo.rows(), w.wo.cols()),
                })
                .collect()
        });
        Grads {
            pool: vec![0.0; state.model.pool.dim()],
            heads,
            lora,
            unc_s: state.unc_s.as_ref().map(|s| vec![0.0; s.len()]),
            enc,
        }
    }

    fn for_each(&self, mut f: impl FnMut(&[f32])) {
        f(&self.pool);
        for g in self.heads.values() {
            f(g.w1.data());
            f(&g.b1);
            f(g.w2.data());
            f(&g.b2);
        }
        if let Some(s) = &self.unc_s {
            f(s);
        }
        for (a, b) in self.lora.values() {
            f(a.data());
            f(b.data());
        }
        if let Some(enc) = &self.enc {
            for g in enc {
                for p in Projection::ALL {
                    f(g.get(p).data());
                }
            }
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f32])) {
        f(&mut self.pool);
        for g in self.heads.values_mut() {
            f(g.w1.data_mut());
            f(&mut g.b1);
            f(g.w2.data_mut());
            f(&mut g.b2);
        }
        if let Some(s) = &mut self.unc_s {
            f(s);
        }
        for (a, b) in self.lora.values_mut() {
            f(a.data_mut());
            f(b.data_mut());
        }
        if let Some(enc) = &mut self.enc {
            for g in enc {
                for p in Projection::ALL {
                    f(g.get_mut(p).data_mut());
                }
            }
        }
    }

    fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        self.for_each(|s| {
            for &v in s {
                acc += f64::from(v) * f64::from(v);
            }
        });
        libm::sqrt(acc)
    }

    fn scale(&mut self, s: f32) {
        self.for_each_mut(|slice| {
            for v in slice {
                *v *= s;
            }
        });
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Group {
    Heads,
    Encoder,
}

/// Visits every (group, params, grads) slot in a fixed order shared by the
/// optimizer state.
fn for_each_slot(state: &mut State, grads: &Grads, mut f: impl FnMut(Group, &mut [f32], &[f32])) {
    f(Group::Heads, &mut state.model.pool.w, &grads.pool);
    for ((dim, head), (gdim, g)) in state.model.heads.iter_mut().zip(grads.heads.iter()) {
        debug_assert_eq!(dim, gdim);
        f(Group::Heads, head.w1.data_mut(), g.w1.data());
        f(Group::Heads, &mut head.b1, &g.b1);
        f(Group::Heads, head.w2.data_mut(), g.w2.data());
        f(Group::Heads, &mut head.b2, &g.b2);
    }
    if let Some(s) = &mut state.unc_s {
        f(Group::Heads, s, grads.unc_s.as_ref().expect("unc grads"));
    }
    if let Some(lora) = &mut state.model.lora {
        for ((k, pair), (gk, g)) in lora.pairs.iter_mut().zip(grads.lora.iter()) {
            debug_assert_eq!(k, gk);
            f(Group::Encoder, pair.a.data_mut(), g.0.data());
            f(Group::Encoder, pair.b.data_mut(), g.1.data());
        }
    }
    if let Some(ws) = &mut state.enc_weights {
        for (w, g) in ws.iter_mut().zip(grads.enc.as_ref().expect("enc grads")) {
            for p in Projection::ALL {
                f(Group::Encoder, w.get_mut(p).data_mut(), g.get(p).data());
            }
        }
    }
}

/// Decoupled-weight-decay Adam.
struct AdamW {
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(state: &mut State, grads: &Grads) -> Self {
        let mut m = Vec::new();
        for_each_slot(state, grads, |_, p, _| m.push(vec![0.0f32; p.len()]));
        let v = m.clone();
        AdamW { t: 0, m, v }
    }

    fn step(&mut self, state: &mut State, grads: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.t as f64);
        let mut slot = 0usize;
        let (m, v) = (&mut self.m, &mut self.v);
        for_each_slot(state, grads, |group, params, g| {
            let (lr, wd) = match group {
                Group::Heads => (cfg.lr_heads, cfg.weight_decay_heads),
                Group::Encoder => (cfg.lr_lora, cfg.weight_decay_lora),
            };
            let ms = &mut m[slot];
            let vs = &mut v[slot];
            for i in 0..params.len() {
                let gi = f64::from(g[i]);
                let p = f64::from(params[i]) * (1.0 - lr * wd);
                let mi = ADAM_BETA1 * f64::from(ms[i]) + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * f64::from(vs[i]) + (1.0 - ADAM_BETA2) * gi * gi;
                ms[i] = mi as f32;
                vs[i] = vi as f32;
                let update = lr * (mi / bc1) / (libm::sqrt(vi / bc2) + ADAM_EPS);
                params[i] = (p - update) as f32;
            }
            slot += 1;
        });
    }
}

// ---- forward/backward plumbing -----------------------------------------

struct ClipForward {
    base: Mat,
    enc_caches: Option<Vec<crate::toy::LayerCache>>,
    pool_cache: PoolCache,
    head_caches: BTreeMap<Dimension, HeadCache>,
}

fn forward_clip(
    state: &State,
    encoder: Option<&ToyAttentionEncoder>,
    eff: Option<&[LayerWeights]>,
    base: Mat,
) -> Result<ClipForward, CoreError> {
    let (feat, enc_caches) = match (encoder, eff) {
        (Some(enc), Some(w)) => {
            let (out, caches) = enc.forward_cached(&base, w);
            (out, Some(caches))
        }
        _ => (base.clone(), None),
    };
    let pool_cache = pool_forward(&feat, &state.model.pool)?;
    let mut head_caches = BTreeMap::new();
    for (dim, head) in &state.model.heads {
        head_caches.insert(*dim, head_forward(&pool_cache.z, head)?);
    }
    Ok(ClipForward {
        base,
        enc_caches,
        pool_cache,
        head_caches,
    })
}

/// Expectation decode plus its gradient in the logits.
fn decode_with_grad(logits: &[f32], centers: &[f64]) -> (f64, Vec<f64>) {
    let mut p: Vec<f32> = logits.to_vec();
    softmax_in_place(&mut p);
    let y: f64 = p
        .iter()
        .zip(centers.iter())
        .map(|(&pi, &c)| f64::from(pi) * c)
        .sum();
    let grad = p
        .iter()
        .zip(centers.iter())
        .map(|(&pi, &c)| f64::from(pi) * (c - y))
        .collect();
    (y, grad)
}

fn predict_batch(
    state: &State,
    encoder: Option<&ToyAttentionEncoder>,
    eff: Option<&[LayerWeights]>,
    store: &dyn FeatureStore,
    ids: &[String],
) -> Result<Vec<BTreeMap<Dimension, f64>>, CoreError> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let frames = store.get(id)?.frames;
        let feat = match (encoder, eff) {
            (Some(enc), Some(w)) => enc.forward(&frames, w),
            _ => frames,
        };
        out.push(state.model.predict(&feat)?);
    }
    Ok(out)
}

// ---- the loop ----------------------------------------------------------

/// Trains a fresh model on the fold's train split, early-stopping on
/// validation SRCC(MI). `timer` supplies monotonic seconds for the log.
pub fn train(
    encoder: EncoderInput,
    store: &dyn FeatureStore,
    fold: &FoldSplit,
    targets: &[MosTarget],
    cfg: &TrainConfig,
    timer: &mut dyn FnMut() -> f64,
) -> Result<(TrainedModel, TrainLog), CoreError> {
    cfg.validate()?;
    let needs_encoder = cfg.mode.uses_lora() || cfg.mode.full_finetune();
    let enc = match (&encoder, needs_encoder) {
        (EncoderInput::Adaptable(e), true) => Some(*e),
        (EncoderInput::Frozen(_), true) => {
            return Err(CoreError::Config(format!(
                "mode {} adapts the encoder but a frozen encoder was supplied",
                cfg.mode.as_str()
            )))
        }
        (EncoderInput::Adaptable(e), false) => {
            // frozen use of an adaptable encoder: fold its stack into inference
            Some(*e)
        }
        (EncoderInput::Frozen(_), false) => None,
    };
    // In frozen modes over an adaptable encoder the store still holds base
    // features, so inference runs the frozen stack; no gradients flow there.
    let frozen_stack: Option<Vec<LayerWeights>> = match (enc, needs_encoder) {
        (Some(e), false) => Some(e.layer_weights().to_vec()),
        _ => None,
    };

    if fold.val_ids.is_empty() {
        return Err(CoreError::Config("empty validation set".into()));
    }
    if fold.train_ids.is_empty() {
        return Err(CoreError::Config("empty train set".into()));
    }

    let target_map: BTreeMap<&str, (f64, f64)> = targets
        .iter()
        .map(|t| (t.clip_id.as_str(), (t.mi, t.ta)))
        .collect();
    for id in fold.train_ids.iter().chain(fold.val_ids.iter()) {
        if !target_map.contains_key(id.as_str()) {
            return Err(CoreError::Incomplete(format!("no MOS target for clip {id}")));
        }
    }

    let spec = encoder.spec();
    let mut model = QualityModel::new(spec, cfg.mode.head_mode(), crate::derive_seed(cfg.seed, 100));
    if cfg.mode.uses_lora() {
        let enc = enc.expect("adaptable");
        model = model.with_lora(
            enc.num_layers(),
            cfg.lora_rank,
            cfg.lora_alpha,
            crate::derive_seed(cfg.seed, 101),
        );
    }
    let mut state = State {
        model,
        unc_s: cfg.mode.uses_uncertainty().then(|| vec![0.0f32; 2]),
        enc_weights: cfg
            .mode
            .full_finetune()
            .then(|| enc.expect("adaptable").layer_weights().to_vec()),
    };

    let grads0 = Grads::zeros_like(&state);
    let mut adam = AdamW::new(&mut state, &grads0);

    let k = crate::model::ORDINAL_BINS;
    let ordinal = cfg.mode.head_mode() == HeadMode::Ordinal;
    let centers = state.model.centers.clone();

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best: Option<(u32, f64, State)> = None;
    let mut epochs_since_best = 0u32;

    let mut order: Vec<String> = fold.train_ids.clone();

    for epoch in 1..=cfg.max_epochs {
        let t0 = timer();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, 200 + u64::from(epoch)));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0u32;
        let mut grad_norm_max = 0.0f64;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // effective encoder weights for this step
            let eff: Option<Vec<LayerWeights>> = if needs_encoder {
                if let Some(w) = &state.enc_weights {
                    Some(w.clone())
                } else {
                    Some(apply_lora(
                        enc.expect("adaptable"),
                        state.model.lora.as_ref().expect("lora"),
                    )?)
                }
            } else {
                frozen_stack.clone()
            };

            // forward
            let mut fwds = Vec::with_capacity(batch.len());
            for id in batch {
                let base = store.get(id)?.frames;
                fwds.push(forward_clip(&state, enc, eff.as_deref(), base)?);
            }

            // per-head batch losses and per-clip output gradients
            let mut head_losses: BTreeMap<Dimension, f64> = BTreeMap::new();
            // d_out[dim][clip][k]
            let mut d_out: BTreeMap<Dimension, Vec<Vec<f64>>> = BTreeMap::new();
            let y_batch: Vec<(f64, f64)> = batch.iter().map(|id| target_map[id.as_str()]).collect();
            let mut decoded_mi: Vec<f64> = Vec::new();
            let mut decode_grads_mi: Vec<Vec<f64>> = Vec::new();

            for dim in Dimension::ALL {
                let ys: Vec<f64> = y_batch
                    .iter()
                    .map(|(mi, ta)| if dim == Dimension::Mi { *mi } else { *ta })
                    .collect();
                if ordinal {
                    let mut logits = Vec::with_capacity(batch.len() * k);
                    let mut soft = Vec::with_capacity(batch.len() * k);
                    for (fwd, &y) in fwds.iter().zip(ys.iter()) {
                        let out = &fwd.head_caches[&dim].out;
                        logits.extend(out.iter().map(|&v| f64::from(v)));
                        soft.extend(soft_targets(y, &cfg.ordinal));
                    }
                    let (l, g) = ordinal_loss(&logits, &soft, k)?;
                    head_losses.insert(dim, l);
                    d_out.insert(dim, g.chunks_exact(k).map(|c| c.to_vec()).collect());
                    if dim == Dimension::Mi {
                        for fwd in &fwds {
                            let (y_hat, dg) =
                                decode_with_grad(&fwd.head_caches[&dim].out, &centers);
                            decoded_mi.push(y_hat);
                            decode_grads_mi.push(dg);
                        }
                    }
                } else {
                    let preds: Vec<f64> = fwds
                        .iter()
                        .map(|f| f64::from(f.head_caches[&dim].out[0]))
                        .collect();
                    let (l, g) = mse_loss(&preds, &ys)?;
                    head_losses.insert(dim, l);
                    d_out.insert(dim, g.into_iter().map(|v| vec![v]).collect());
                }
            }

            // contrastive on decoded MI predictions vs MI targets
            let (con_loss, con_grad) = if cfg.mode.uses_contrastive() {
                let ys: Vec<f64> = y_batch.iter().map(|(mi, _)| *mi).collect();
                let (l, g, _) = contrastive_loss(&decoded_mi, &ys, &cfg.contrastive)?;
                (Some(l), Some(g))
            } else {
                (None, None)
            };

            if head_losses.values().any(|l| !l.is_finite()) {
                return Err(CoreError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx as u32,
                    lr_heads: cfg.lr_heads,
                    lr_lora: cfg.lr_lora,
                });
            }
            let unc_state = state.unc_s.as_ref().map(|s| UncertaintyState {
                s: Dimension::ALL
                    .iter()
                    .zip(s.iter())
                    .map(|(d, &v)| (*d, f64::from(v)))
                    .collect(),
            });
            let combined = combine(
                &head_losses,
                con_loss,
                epoch,
                cfg.mode,
                unc_state.as_ref(),
                &cfg.contrastive,
            )?;
            if !combined.total.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx as u32,
                    lr_heads: cfg.lr_heads,
                    lr_lora: cfg.lr_lora,
                });
            }
            epoch_loss += combined.total;
            n_batches += 1;

            // backward
            let mut grads = Grads::zeros_like(&state);
            if let Some(gs) = &mut grads.unc_s {
                for (i, dim) in Dimension::ALL.iter().enumerate() {
                    gs[i] = combined.ds[dim] as f32;
                }
            }
            for (ci, fwd) in fwds.iter().enumerate() {
                let mut d_z = vec![0.0f32; state.model.pool.dim()];
                for (dim, head) in &state.model.heads {
                    let w = combined.head_weight[dim];
                    let mut d: Vec<f32> = d_out[dim][ci].iter().map(|&g| (w * g) as f32).collect();
                    if *dim == Dimension::Mi && combined.contrastive_weight > 0.0 {
                        let gc = con_grad.as_ref().expect("contrastive grad")[ci]
                            * combined.contrastive_weight;
                        for (dj, dgj) in d.iter_mut().zip(decode_grads_mi[ci].iter()) {
                            *dj += (gc * dgj) as f32;
                        }
                    }
                    let hg = head_backward(&fwd.pool_cache.z, head, &fwd.head_caches[dim], &d);
                    let acc = grads.heads.get_mut(dim).expect("head grads");
                    acc.w1.add_scaled(&hg.w1, 1.0);
                    acc.w2.add_scaled(&hg.w2, 1.0);
                    for (a, b) in acc.b1.iter_mut().zip(hg.b1.iter()) {
                        *a += b;
                    }
                    for (a, b) in acc.b2.iter_mut().zip(hg.b2.iter()) {
                        *a += b;
                    }
                    for (a, b) in d_z.iter_mut().zip(hg.d_z.iter()) {
                        *a += b;
                    }
                }
                // pooling sees the post-encoder features
                let feat_owned;
                let feat: &Mat = if let Some(caches) = &fwd.enc_caches {
                    let _ = caches;
                    feat_owned = match (enc, eff.as_deref()) {
                        (Some(e), Some(w)) => e.forward(&fwd.base, w),
                        _ => unreachable!("enc caches imply an encoder"),
                    };
                    &feat_owned
                } else {
                    &fwd.base
                };
                let (d_w, d_feat) = pool_backward(feat, &state.model.pool, &fwd.pool_cache, &d_z);
                for (a, b) in grads.pool.iter_mut().zip(d_w.iter()) {
                    *a += b;
                }

                if needs_encoder {
                    let e = enc.expect("adaptable");
                    let caches = fwd.enc_caches.as_ref().expect("enc caches");
                    let eff_w = eff.as_deref().expect("eff weights");
                    let (layer_grads, _) = e.backward(&d_feat, caches, eff_w);
                    if let Some(lora) = &state.model.lora {
                        let scaling = lora.scaling();
                        for ((layer, proj), (ga, gb)) in grads.lora.iter_mut() {
                            let d_eff = layer_grads[*layer as usize].get(*proj);
                            let pair = &lora.pairs[&(*layer, *proj)];
                            // eff = base + s B A  =>  dA = s B^T dW, dB = s dW A^T
                            let da = pair.b.matmul_at(d_eff);
                            let db = d_eff.matmul_bt(&pair.a);
                            ga.add_scaled(&da, scaling);
                            gb.add_scaled(&db, scaling);
                        }
                    }
                    if let Some(ge) = &mut grads.enc {
                        for (acc, g) in ge.iter_mut().zip(layer_grads.iter()) {
                            for p in Projection::ALL {
                                acc.get_mut(p).add_scaled(g.get(p), 1.0);
                            }
                        }
                    }
                }
            }

            // clip and step
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx as u32,
                    lr_heads: cfg.lr_heads,
                    lr_lora: cfg.lr_lora,
                });
            }
            if norm > cfg.grad_clip_norm {
                grads.scale((cfg.grad_clip_norm / norm) as f32);
            }
            grad_norm_max = grad_norm_max.max(grads.global_norm());
            adam.step(&mut state, &grads, cfg);
        }

        // validation
        let eff: Option<Vec<LayerWeights>> = if needs_encoder {
            if let Some(w) = &state.enc_weights {
                Some(w.clone())
            } else {
                Some(apply_lora(
                    enc.expect("adaptable"),
                    state.model.lora.as_ref().expect("lora"),
                )?)
            }
        } else {
            frozen_stack.clone()
        };
        let val_preds = predict_batch(&state, enc, eff.as_deref(), store, &fold.val_ids)?;
        let (mut mi_hat, mut ta_hat, mut mi_y, mut ta_y) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (p, id) in val_preds.iter().zip(fold.val_ids.iter()) {
            let (mi, ta) = target_map[id.as_str()];
            mi_hat.push(p[&Dimension::Mi]);
            ta_hat.push(p[&Dimension::Ta]);
            mi_y.push(mi);
            ta_y.push(ta);
        }
        let val_srcc_mi = spearman(&mi_hat, &mi_y).unwrap_or(f64::NAN);
        let val_srcc_ta = spearman(&ta_hat, &ta_y).unwrap_or(f64::NAN);

        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / f64::from(n_batches.max(1)),
            val_srcc_mi,
            val_srcc_ta,
            lr_heads: cfg.lr_heads,
            lr_lora: cfg.lr_lora,
            grad_norm_max,
            wall_seconds: timer() - t0,
        });

        // strict improvement keeps the earlier epoch on ties
        let improved = match &best {
            None => val_srcc_mi.is_finite(),
            Some((_, best_srcc, _)) => val_srcc_mi.is_finite() && val_srcc_mi > *best_srcc,
        };
        if improved {
            best = Some((
                epoch,
                val_srcc_mi,
                State {
                    model: state.model.clone(),
                    unc_s: state.unc_s.clone(),
                    enc_weights: state.enc_weights.clone(),
                },
            ));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                log.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    // restore best weights
    if let Some((epoch, _, best_state)) = best {
        log.best_epoch = epoch;
        state = best_state;
    }

    let unc = state.unc_s.map(|s| UncertaintyState {
        s: Dimension::ALL
            .iter()
            .zip(s.iter())
            .map(|(d, &v)| (*d, f64::from(v)))
            .collect(),
    });
    Ok((
        TrainedModel {
            model: state.model,
            unc,
            encoder_weights: state.enc_weights,
            mode: cfg.mode,
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMatrix, MemoryFeatureStore};
    use rand::Rng;

    fn synthetic_setup(
        n_clips: usize,
        dim: usize,
        seed: u64,
    ) -> (MemoryFeatureStore, Vec<MosTarget>, FoldSplit, EncoderSpec) {
        // Targets are a fixed linear probe of the per-clip feature mean plus
        // small noise, so ranking them is learnable from pooled features.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = MemoryFeatureStore::new();
        let mut targets = Vec::new();
        let mut ids = Vec::new();
        let mut raw = Vec::new();
        for i in 0..n_clips {
            let frames = 8;
            let center: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut m = Mat::zeros(frames, dim);
            for r in 0..frames {
                for c in 0..dim {
                    m.set(r, c, center[c] + rng.random_range(-0.05f32..0.05));
                }
            }
            let score: f64 = center
                .iter()
                .zip(probe.iter())
                .map(|(&x, &p)| f64::from(x) * p)
                .sum();
            let id = format!("clip{i:03}");
            store.insert(FeatureMatrix {
                frames: m,
                frame_rate: 50.0,
                encoder_id: "synt".into(),
                clip_id: id.clone(),
            });
            ids.push(id);
            raw.push(score + rng.random_range(-0.02..0.02));
        }
        // map raw scores into [1, 5]
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (id, &r) in ids.iter().zip(raw.iter()) {
            let y = 1.0 + 4.0 * (r - lo) / (hi - lo);
            targets.push(MosTarget {
                clip_id: id.clone(),
                mi: y,
                ta: 6.0 - y,
            });
        }
        let n_val = n_clips / 5;
        let fold = FoldSplit {
            fold_index: 0,
            train_ids: ids[n_val..].to_vec(),
            val_ids: ids[..n_val].to_vec(),
            test_ids: Vec::new(),
            seed,
        };
        let spec = EncoderSpec {
            encoder_id: "synt".into(),
            hidden_dim: dim,
            frame_rate: 50.0,
            layer: 0,
            adaptable: false,
        };
        (store, targets, fold, spec)
    }

    fn tick() -> impl FnMut() -> f64 {
        let mut t = 0.0;
        move || {
            t += 1.0;
            t
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (store, targets, fold, spec) = synthetic_setup(20, 8, 1);
        let mut cfg = TrainConfig::new(TrainMode::A1, 7);
        cfg.max_epochs = 0;
        cfg.patience = 0;
        let (tm, log) = train(
            EncoderInput::Frozen(spec.clone()),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(log.best_epoch, 0);
        assert_eq!(log.stop_reason, StopReason::MaxEpochs);
        let fresh = QualityModel::new(spec, HeadMode::Regression, crate::derive_seed(7, 100));
        assert_eq!(tm.model, fresh);
    }

    #[test]
    fn linear_probe_task_reaches_high_val_srcc() {
        let (store, targets, fold, spec) = synthetic_setup(100, 16, 2);
        let mut cfg = TrainConfig::new(TrainMode::A1, 3);
        cfg.max_epochs = 60;
        cfg.patience = 60;
        cfg.lr_heads = 3e-3; // tiny synthetic task tolerates a hotter rate
        let (_, log) = train(
            EncoderInput::Frozen(spec),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        let best = log
            .epochs
            .iter()
            .map(|e| e.val_srcc_mi)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.95, "best val SRCC {best}");
        // the TA head learns the reversed target equally well
        let best_ta = log
            .epochs
            .iter()
            .map(|e| e.val_srcc_ta)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best_ta >= 0.9, "best val TA SRCC {best_ta}");
    }

    #[test]
    fn training_is_reproducible() {
        let (store, targets, fold, spec) = synthetic_setup(40, 8, 4);
        let mut cfg = TrainConfig::new(TrainMode::A2, 5);
        cfg.max_epochs = 5;
        cfg.patience = 5;
        let run = || {
            train(
                EncoderInput::Frozen(spec.clone()),
                &store,
                &fold,
                &targets,
                &cfg,
                &mut tick(),
            )
            .unwrap()
        };
        let (tm1, log1) = run();
        let (tm2, log2) = run();
        assert_eq!(log1, log2);
        assert_eq!(tm1.model, tm2.model);
    }

    #[test]
    fn best_epoch_attains_max_and_clip_holds() {
        let (store, targets, fold, spec) = synthetic_setup(60, 8, 6);
        let mut cfg = TrainConfig::new(TrainMode::A2, 8);
        cfg.max_epochs = 12;
        cfg.patience = 12;
        let (_, log) = train(
            EncoderInput::Frozen(spec),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        let max = log
            .epochs
            .iter()
            .map(|e| e.val_srcc_mi)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_rec = log
            .epochs
            .iter()
            .find(|e| e.epoch == log.best_epoch)
            .unwrap();
        assert_eq!(best_rec.val_srcc_mi, max);
        // earliest epoch achieving the max is the one kept
        let first_max = log
            .epochs
            .iter()
            .find(|e| e.val_srcc_mi == max)
            .unwrap()
            .epoch;
        assert_eq!(log.best_epoch, first_max);
        for e in &log.epochs {
            assert!(e.grad_norm_max <= 1.0 + 1e-6, "epoch {} norm {}", e.epoch, e.grad_norm_max);
            assert!(e.wall_seconds > 0.0);
        }
    }

    #[test]
    fn lora_training_leaves_base_weights_untouched() {
        // base features + adaptable encoder; A3b exercises warm start too
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ToyAttentionEncoder::standard();
        let before = enc.layer_weights().to_vec();
        let mut store = MemoryFeatureStore::new();
        let mut targets = Vec::new();
        let mut ids = Vec::new();
        for i in 0..30 {
            let mut m = Mat::zeros(6, 64);
            for v in m.data_mut() {
                *v = rng.random_range(-1.0f32..1.0);
            }
            let id = format!("c{i}");
            store.insert(FeatureMatrix {
                frames: m,
                frame_rate: 50.0,
                encoder_id: "toy-attn-base".into(),
                clip_id: id.clone(),
            });
            targets.push(MosTarget {
                clip_id: id.clone(),
                mi: rng.random_range(1.0..5.0),
                ta: rng.random_range(1.0..5.0),
            });
            ids.push(id);
        }
        let fold = FoldSplit {
            fold_index: 0,
            train_ids: ids[6..].to_vec(),
            val_ids: ids[..6].to_vec(),
            test_ids: Vec::new(),
            seed: 9,
        };
        let mut cfg = TrainConfig::new(TrainMode::A3b, 10);
        cfg.max_epochs = 7;
        cfg.patience = 7;
        cfg.lr_lora = 1e-3; // make the deltas visibly move in few epochs
        let (tm, log) = train(
            EncoderInput::Adaptable(&enc),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        assert_eq!(enc.layer_weights(), &before[..]);
        assert_eq!(log.epochs.len(), 7);
        // B matrices moved away from zero once training ran
        let lora = tm.model.lora.as_ref().unwrap();
        let moved = lora
            .pairs
            .values()
            .any(|p| p.b.data().iter().any(|&v| v != 0.0));
        assert!(moved, "LoRA B never left zero");
        // prediction path requires the encoder
        assert!(tm.needs_encoder());
        let frames = store.get("c0").unwrap().frames;
        assert!(tm.predict_clip(None, &frames).is_err());
        tm.predict_clip(Some(&enc), &frames).unwrap();
    }

    #[test]
    fn a3c_learns_uncertainty_scalars() {
        let (store, targets, fold, _) = synthetic_setup(40, 64, 12);
        let enc = ToyAttentionEncoder::standard();
        let mut cfg = TrainConfig::new(TrainMode::A3c, 13);
        cfg.max_epochs = 3;
        cfg.patience = 3;
        let (tm, _) = train(
            EncoderInput::Adaptable(&enc),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        let unc = tm.unc.unwrap();
        assert_eq!(unc.s.len(), 2);
        assert!(unc.s.values().all(|v| v.is_finite()));
        assert!(unc.s.values().any(|&v| v != 0.0), "s never updated");
    }

    #[test]
    fn empty_val_set_is_config_error() {
        let (store, targets, mut fold, spec) = synthetic_setup(20, 8, 14);
        fold.val_ids.clear();
        let cfg = TrainConfig::new(TrainMode::A1, 1);
        let err = train(
            EncoderInput::Frozen(spec),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn non_finite_features_abort_with_diagnostics() {
        let (mut store, targets, fold, spec) = synthetic_setup(20, 8, 15);
        let id = fold.train_ids[0].clone();
        let mut bad = store.get(&id).unwrap();
        bad.frames.set(0, 0, f32::NAN);
        store.insert(bad);
        let mut cfg = TrainConfig::new(TrainMode::A1, 1);
        cfg.max_epochs = 2;
        cfg.patience = 2;
        let err = train(
            EncoderInput::Frozen(spec),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::NonFiniteLoss { .. }), "{err:?}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(TrainMode::A1, 1);
        cfg.precision = Precision::MixedBf16;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(TrainMode::A1, 1);
        cfg.patience = 99;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::new(TrainMode::A4, 0).validate().is_ok());
    }

    #[test]
    fn a4_fine_tunes_encoder_copy() {
        let (store, targets, fold, _) = synthetic_setup(30, 64, 16);
        let enc = ToyAttentionEncoder::standard();
        let before = enc.layer_weights().to_vec();
        let mut cfg = TrainConfig::new(TrainMode::A4, 17);
        cfg.max_epochs = 3;
        cfg.patience = 3;
        cfg.lr_lora = 1e-3;
        let (tm, _) = train(
            EncoderInput::Adaptable(&enc),
            &store,
            &fold,
            &targets,
            &cfg,
            &mut tick(),
        )
        .unwrap();
        assert_eq!(enc.layer_weights(), &before[..]);
        let tuned = tm.encoder_weights.as_ref().unwrap();
        assert_ne!(&tuned[..], &before[..], "A4 must move encoder weights");
    }
}
