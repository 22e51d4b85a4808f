//! Loss components and their combination schedule.
//!
//! All losses run in f64: the trainer converts head outputs up and gradients
//! back down, which keeps analytic gradients within finite-difference noise.

use crate::error::CoreError;
use crate::model::{Dimension, HeadMode};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Training variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    A1,
    A2,
    A3a,
    A3b,
    A3c,
    A4,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::A1,
        TrainMode::A2,
        TrainMode::A3a,
        TrainMode::A3b,
        TrainMode::A3c,
        TrainMode::A4,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::A1 => "A1",
            TrainMode::A2 => "A2",
            TrainMode::A3a => "A3a",
            TrainMode::A3b => "A3b",
            TrainMode::A3c => "A3c",
            TrainMode::A4 => "A4",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CoreError> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Config(format!("unknown mode {s:?}")))
    }

    /// A1 regresses MOS directly; every later variant uses ordinal heads.
    pub fn head_mode(&self) -> HeadMode {
        match self {
            TrainMode::A1 => HeadMode::Regression,
            _ => HeadMode::Ordinal,
        }
    }

    /// Whether the encoder gets LoRA deltas.
    pub fn uses_lora(&self) -> bool {
        matches!(self, TrainMode::A3a | TrainMode::A3b | TrainMode::A3c)
    }

    /// Whether the encoder itself is trained (full fine-tune, no LoRA).
    pub fn full_finetune(&self) -> bool {
        matches!(self, TrainMode::A4)
    }

    /// Whether the pairwise contrastive term ever activates.
    pub fn uses_contrastive(&self) -> bool {
        matches!(self, TrainMode::A3b | TrainMode::A3c)
    }

    /// Whether per-head uncertainty weighting applies.
    pub fn uses_uncertainty(&self) -> bool {
        matches!(self, TrainMode::A3c)
    }
}

/// Gaussian-softened ordinal target configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalTargetConfig {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl Default for OrdinalTargetConfig {
    fn default() -> Self {
        OrdinalTargetConfig {
            centers: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            sigma: 0.5,
        }
    }
}

impl OrdinalTargetConfig {
    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.sigma <= 0.0 {
            return Err(CoreError::Config("sigma must be positive".into()));
        }
        if self.centers.len() < 2 || self.centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::Config(
                "centers must be strictly increasing with at least 2 bins".into(),
            ));
        }
        Ok(())
    }
}

/// Pairwise hinge configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub weight: f64,
    pub warm_start_epoch: u32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            margin: 0.5,
            weight: 0.5,
            warm_start_epoch: 6,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.margin <= 0.0 || self.weight < 0.0 {
            return Err(CoreError::Config(
                "contrastive margin must be > 0 and weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Learned log-variances, one per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyState {
    pub s: BTreeMap<Dimension, f64>,
}

impl Default for UncertaintyState {
    fn default() -> Self {
        let mut s = BTreeMap::new();
        for d in Dimension::ALL {
            s.insert(d, 0.0);
        }
        UncertaintyState { s }
    }
}

/// Mean squared error and its gradient in the predictions.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), CoreError> {
    if pred.len() != target.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "pred len {} vs target len {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::InvalidInput("empty batch in mse_loss".into()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Gaussian-softened target distribution over the ordinal bins.
pub fn soft_targets(y: f64, cfg: &OrdinalTargetConfig) -> Vec<f64> {
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let mut p: Vec<f64> = cfg
        .centers
        .iter()
        .map(|&c| libm::exp(-(y - c) * (y - c) * inv))
        .collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Mean soft cross-entropy between target rows and softmax(logit rows), plus
/// the gradient in the logits. Both matrices are row-major N x K.
pub fn ordinal_loss(
    logits: &[f64],
    targets: &[f64],
    k: usize,
) -> Result<(f64, Vec<f64>), CoreError> {
    if k == 0 || logits.len() != targets.len() || logits.len() % k != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "logits len {} targets len {} bins {k}",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len() / k;
    if n == 0 {
        return Err(CoreError::InvalidInput("empty batch in ordinal_loss".into()));
    }
    for row in targets.chunks_exact(k) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "target row sums to {s}, expected a distribution"
            )));
        }
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..n {
        let lrow = &logits[i * k..(i + 1) * k];
        let trow = &targets[i * k..(i + 1) * k];
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lrow.iter().map(|&v| libm::exp(v - max)).collect();
        let z: f64 = exps.iter().sum();
        let log_z = libm::log(z) + max;
        for j in 0..k {
            loss -= trow[j] * (lrow[j] - log_z);
            grad[i * k + j] = (exps[j] / z - trow[j]) / nf;
        }
    }
    Ok((loss / nf, grad))
}

/// Pairwise hinge over ordered in-batch pairs with y_i > y_j + m; mean
/// reduction. Returns (loss, gradient, pair count).
pub fn contrastive_loss(
    preds: &[f64],
    targets: &[f64],
    cfg: &ContrastiveConfig,
) -> Result<(f64, Vec<f64>, usize), CoreError> {
    if preds.len() != targets.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "preds len {} vs targets len {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len();
    let mut grad = vec![0.0; n];
    if n < 2 {
        return Ok((0.0, grad, 0));
    }
    let mut pairs = 0usize;
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || targets[i] <= targets[j] + cfg.margin {
                continue;
            }
            pairs += 1;
            let h = cfg.margin - (preds[i] - preds[j]);
            if h > 0.0 {
                loss += h;
                grad[i] -= 1.0;
                grad[j] += 1.0;
            }
        }
    }
    if pairs == 0 {
        return Ok((0.0, grad, 0));
    }
    let pf = pairs as f64;
    for g in &mut grad {
        *g /= pf;
    }
    Ok((loss / pf, grad, pairs))
}

/// Which loss components are active for (mode, epoch). Epochs are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveComponents {
    pub mse: bool,
    pub ordinal: bool,
    pub contrastive: bool,
    pub uncertainty: bool,
}

pub fn epoch_schedule(mode: TrainMode, epoch: u32, cfg: &ContrastiveConfig) -> ActiveComponents {
    ActiveComponents {
        mse: mode.head_mode() == HeadMode::Regression,
        ordinal: mode.head_mode() == HeadMode::Ordinal,
        contrastive: mode.uses_contrastive() && epoch >= cfg.warm_start_epoch,
        uncertainty: mode.uses_uncertainty(),
    }
}

/// Combined batch loss plus the multipliers the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineOutput {
    pub total: f64,
    /// Multiplier on each head's loss gradient.
    pub head_weight: BTreeMap<Dimension, f64>,
    /// Multiplier on the contrastive gradient (0 when inactive).
    pub contrastive_weight: f64,
    /// Gradients of the total wrt each s_h (A3c only).
    pub ds: BTreeMap<Dimension, f64>,
}

/// Total loss per the mode's combination rule. `contrastive` must be Some
/// for modes that use the hinge (its value is ignored before warm start).
pub fn combine(
    head_losses: &BTreeMap<Dimension, f64>,
    contrastive: Option<f64>,
    epoch: u32,
    mode: TrainMode,
    unc: Option<&UncertaintyState>,
    cfg: &ContrastiveConfig,
) -> Result<CombineOutput, CoreError> {
    if head_losses.is_empty() {
        return Err(CoreError::InvalidInput("no head losses".into()));
    }
    if head_losses.values().any(|l| !l.is_finite()) {
        return Err(CoreError::InvalidInput("non-finite head loss".into()));
    }
    let active = epoch_schedule(mode, epoch, cfg);
    if active.uncertainty && unc.is_none() {
        return Err(CoreError::Config("A3c requires an UncertaintyState".into()));
    }
    if mode.uses_contrastive() && contrastive.is_none() {
        return Err(CoreError::Config(format!(
            "mode {} requires a contrastive loss value",
            mode.as_str()
        )));
    }

    let mut total = 0.0;
    let mut head_weight = BTreeMap::new();
    let mut ds = BTreeMap::new();
    for (&dim, &l) in head_losses {
        if active.uncertainty {
            let s = *unc
                .unwrap()
                .s
                .get(&dim)
                .ok_or_else(|| CoreError::Config(format!("no s for head {}", dim.as_str())))?;
            let w = libm::exp(-s) / 2.0;
            total += w * l + s / 2.0;
            head_weight.insert(dim, w);
            ds.insert(dim, (-libm::exp(-s) * l + 1.0) / 2.0);
        } else {
            total += l;
            head_weight.insert(dim, 1.0);
        }
    }
    let contrastive_weight = if active.contrastive {
        total += cfg.weight * contrastive.unwrap();
        cfg.weight
    } else {
        0.0
    };
    Ok(CombineOutput {
        total,
        head_weight,
        contrastive_weight,
        ds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_hand_values() {
        let (l, _) = mse_loss(&[3.0], &[5.0]).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
        let (l, g) = mse_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((l - 2.5).abs() < 1e-12);
        assert!((g[0] + 1.0).abs() < 1e-12);
        assert!((g[1] + 2.0).abs() < 1e-12);
        let (l, _) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn soft_targets_symmetric_at_center() {
        let cfg = OrdinalTargetConfig::default();
        let p = soft_targets(3.0, &cfg);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!((p[1] - p[3]).abs() < 1e-12);
        assert!((p[0] - p[4]).abs() < 1e-12);
        assert!(p[2] > p[1] && p[2] > p[3]);
        // ratio p_3 / p_2 = exp(0) / exp(-2) = e^2
        assert!((p[2] / p[1] - libm::exp(2.0)).abs() < 1e-9);
        // evaluate exp(0), exp(-2), exp(-8) and normalize
        let raw = [libm::exp(-8.0), libm::exp(-2.0), 1.0, libm::exp(-2.0), libm::exp(-8.0)];
        let z: f64 = raw.iter().sum();
        assert!((p[2] - 1.0 / z).abs() < 1e-9);
        assert!((p[1] - libm::exp(-2.0) / z).abs() < 1e-9);
        // normalized values of (e^-8, e^-2, 1, e^-2, e^-8)
        assert!((p[1] - 0.10645).abs() < 5e-5);
        assert!((p[2] - 0.78657).abs() < 5e-5);
    }

    #[test]
    fn soft_targets_sharp_sigma_near_one_hot() {
        // 0.15 keeps even the farthest bin above f64 underflow
        let cfg = OrdinalTargetConfig {
            sigma: 0.15,
            ..Default::default()
        };
        let p = soft_targets(4.0, &cfg);
        assert!(p[3] > 0.9999999);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn soft_targets_always_normalized_and_positive() {
        let cfg = OrdinalTargetConfig::default();
        let mut y = 1.0;
        while y <= 5.0 {
            let p = soft_targets(y, &cfg);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
            y += 0.13;
        }
    }

    #[test]
    fn ordinal_uniform_logits_give_ln_k() {
        let cfg = OrdinalTargetConfig::default();
        let t = soft_targets(2.7, &cfg);
        let logits = [0.0f64; 5];
        let (l, _) = ordinal_loss(&logits, &t, 5).unwrap();
        assert!((l - libm::log(5.0)).abs() < 1e-12);
    }

    #[test]
    fn ordinal_matching_logits_attain_entropy() {
        let cfg = OrdinalTargetConfig::default();
        let t = soft_targets(3.4, &cfg);
        let logits: Vec<f64> = t.iter().map(|&p| libm::log(p)).collect();
        let entropy: f64 = -t.iter().map(|&p| p * libm::log(p)).sum::<f64>();
        let (l, _) = ordinal_loss(&logits, &t, 5).unwrap();
        assert!((l - entropy).abs() < 1e-9);
        // any other logits are at least the entropy
        let (worse, _) = ordinal_loss(&[1.0, 0.0, 2.0, -1.0, 0.5], &t, 5).unwrap();
        assert!(worse >= entropy - 1e-12);
    }

    #[test]
    fn ordinal_rejects_unnormalized_targets() {
        let bad = [0.5f64, 0.5, 0.5, 0.0, 0.0];
        assert!(ordinal_loss(&[0.0; 5], &bad, 5).is_err());
    }

    #[test]
    fn contrastive_hand_values() {
        let cfg = ContrastiveConfig::default();
        // satisfied margin: diff 1.0 > m
        let (l, _, p) = contrastive_loss(&[2.0, 1.0], &[4.0, 1.0], &cfg).unwrap();
        assert_eq!(p, 1);
        assert_eq!(l, 0.0);
        // hinge arithmetic: diff 0.2 -> 0.3
        let (l, _, _) = contrastive_loss(&[1.2, 1.0], &[4.0, 1.0], &cfg).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        // no qualifying pairs
        let (l, _, p) = contrastive_loss(&[5.0, 1.0], &[1.0, 1.2], &cfg).unwrap();
        assert_eq!(p, 0);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn contrastive_translation_invariant_and_monotone() {
        let cfg = ContrastiveConfig::default();
        let preds = [1.0, 2.5, 0.5, 3.0];
        let targets = [1.0, 3.0, 2.0, 5.0];
        let (l, _, _) = contrastive_loss(&preds, &targets, &cfg).unwrap();
        let shifted: Vec<f64> = preds.iter().map(|p| p + 7.3).collect();
        let (l2, _, _) = contrastive_loss(&shifted, &targets, &cfg).unwrap();
        assert!((l - l2).abs() < 1e-12);
        // widening the qualifying pair's predicted gap never increases its term
        let mut prev = f64::INFINITY;
        for gap in [-0.5, 0.0, 0.2, 0.5, 1.0] {
            let (l3, _, _) = contrastive_loss(&[1.0 + gap, 1.0], &[4.0, 1.0], &cfg).unwrap();
            assert!(l3 <= prev + 1e-12);
            prev = l3;
        }
    }

    #[test]
    fn schedule_warm_start() {
        let cfg = ContrastiveConfig::default();
        let s5 = epoch_schedule(TrainMode::A3b, 5, &cfg);
        assert!(s5.ordinal && !s5.contrastive);
        let s6 = epoch_schedule(TrainMode::A3b, 6, &cfg);
        assert!(s6.ordinal && s6.contrastive);
        let a1 = epoch_schedule(TrainMode::A1, 30, &cfg);
        assert!(a1.mse && !a1.ordinal && !a1.contrastive && !a1.uncertainty);
    }

    #[test]
    fn combine_a3b_before_warm_start_drops_hinge() {
        let cfg = ContrastiveConfig::default();
        let mut losses = BTreeMap::new();
        losses.insert(Dimension::Mi, 1.0);
        losses.insert(Dimension::Ta, 2.0);
        let out = combine(&losses, Some(10.0), 5, TrainMode::A3b, None, &cfg).unwrap();
        assert_eq!(out.total, 3.0);
        assert_eq!(out.contrastive_weight, 0.0);
        let out6 = combine(&losses, Some(10.0), 6, TrainMode::A3b, None, &cfg).unwrap();
        assert!((out6.total - 8.0).abs() < 1e-12);
        assert_eq!(out6.contrastive_weight, 0.5);
    }

    #[test]
    fn combine_a3c_identity_at_zero_s() {
        let cfg = ContrastiveConfig::default();
        let unc = UncertaintyState::default();
        let mut losses = BTreeMap::new();
        losses.insert(Dimension::Mi, 1.5);
        losses.insert(Dimension::Ta, 0.5);
        let out = combine(&losses, Some(0.0), 3, TrainMode::A3c, Some(&unc), &cfg).unwrap();
        // all s_h = 0 -> 1/2 sum L_h
        assert!((out.total - 1.0).abs() < 1e-12);
        // d total / d s_h at 0 = (-L_h + 1) / 2
        assert!((out.ds[&Dimension::Mi] - (-1.5 + 1.0) / 2.0).abs() < 1e-12);
        assert!((out.ds[&Dimension::Ta] - (-0.5 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn combine_config_errors() {
        let cfg = ContrastiveConfig::default();
        let mut losses = BTreeMap::new();
        losses.insert(Dimension::Mi, 1.0);
        assert!(combine(&losses, Some(0.0), 1, TrainMode::A3c, None, &cfg).is_err());
        assert!(combine(&losses, None, 9, TrainMode::A3b, None, &cfg).is_err());
        losses.insert(Dimension::Ta, f64::NAN);
        assert!(combine(&losses, None, 1, TrainMode::A1, None, &cfg).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-4;
        let ord_cfg = OrdinalTargetConfig::default();
        let con_cfg = ContrastiveConfig::default();
        for _ in 0..50 {
            let n = rng.random_range(2..8);

            // mse
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
            let (_, g) = mse_loss(&pred, &target).unwrap();
            for i in 0..n {
                let mut p = pred.clone();
                p[i] += eps;
                let (up, _) = mse_loss(&p, &target).unwrap();
                p[i] -= 2.0 * eps;
                let (down, _) = mse_loss(&p, &target).unwrap();
                assert!(rel_err(g[i], (up - down) / (2.0 * eps)) < 1e-4);
            }

            // ordinal
            let logits: Vec<f64> = (0..n * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<f64> = (0..n)
                .flat_map(|_| soft_targets(rng.random_range(1.0..5.0), &ord_cfg))
                .collect();
            let (_, g) = ordinal_loss(&logits, &targets, 5).unwrap();
            for i in (0..n * 5).step_by(3) {
                let mut l = logits.clone();
                l[i] += eps;
                let (up, _) = ordinal_loss(&l, &targets, 5).unwrap();
                l[i] -= 2.0 * eps;
                let (down, _) = ordinal_loss(&l, &targets, 5).unwrap();
                let fd = (up - down) / (2.0 * eps);
                if fd.abs() > 1e-6 {
                    assert!(rel_err(g[i], fd) < 1e-4, "{} vs {fd}", g[i]);
                }
            }

            // contrastive: nudge away from hinge kinks before differencing
            let preds: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
            let (_, g, pairs) = contrastive_loss(&preds, &target, &con_cfg).unwrap();
            if pairs > 0 {
                for i in 0..n {
                    let mut p = preds.clone();
                    p[i] += eps;
                    let (up, _, _) = contrastive_loss(&p, &target, &con_cfg).unwrap();
                    p[i] -= 2.0 * eps;
                    let (down, _, _) = contrastive_loss(&p, &target, &con_cfg).unwrap();
                    let fd = (up - down) / (2.0 * eps);
                    // the hinge is piecewise linear; skip points straddling a kink
                    let near_kink = (0..n).any(|j| {
                        j != i && ((preds[i] - preds[j]).abs() - con_cfg.margin).abs() < 2.0 * eps
                    });
                    if !near_kink && fd.abs() > 1e-6 {
                        assert!(rel_err(g[i], fd) < 1e-4, "{} vs {fd}", g[i]);
                    } else if !near_kink {
                        assert!(g[i].abs() < 1e-6);
                    }
                }
            }

            // uncertainty combination wrt s_h
            let unc = UncertaintyState {
                s: {
                    let mut m = BTreeMap::new();
                    m.insert(Dimension::Mi, rng.random_range(-1.0..1.0));
                    m.insert(Dimension::Ta, rng.random_range(-1.0..1.0));
                    m
                },
            };
            let mut losses = BTreeMap::new();
            losses.insert(Dimension::Mi, rng.random_range(0.1..3.0));
            losses.insert(Dimension::Ta, rng.random_range(0.1..3.0));
            let out = combine(&losses, Some(0.3), 9, TrainMode::A3c, Some(&unc), &con_cfg).unwrap();
            for dim in Dimension::ALL {
                let mut u = unc.clone();
                *u.s.get_mut(&dim).unwrap() += eps;
                let up = combine(&losses, Some(0.3), 9, TrainMode::A3c, Some(&u), &con_cfg)
                    .unwrap()
                    .total;
                *u.s.get_mut(&dim).unwrap() -= 2.0 * eps;
                let down = combine(&losses, Some(0.3), 9, TrainMode::A3c, Some(&u), &con_cfg)
                    .unwrap()
                    .total;
                assert!(rel_err(out.ds[&dim], (up - down) / (2.0 * eps)) < 1e-4);
            }
        }
    }

    #[test]
    fn mode_properties() {
        assert_eq!(TrainMode::A1.head_mode(), HeadMode::Regression);
        assert_eq!(TrainMode::A2.head_mode(), HeadMode::Ordinal);
        assert!(TrainMode::A3a.uses_lora() && !TrainMode::A3a.uses_contrastive());
        assert!(TrainMode::A4.full_finetune() && !TrainMode::A4.uses_lora());
        assert_eq!(TrainMode::parse("a3b").unwrap(), TrainMode::A3b);
        assert!(TrainMode::parse("A9").is_err());
    }
}
