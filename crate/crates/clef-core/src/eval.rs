//! Cross-validated evaluation: utterance- and system-level correlation
//! reports, ablation deltas, degradation concordance, and the data-efficiency
//! sweep.

use crate::audio::{DegradationKind, Severity};
use crate::dataset::{subsample_train, ClipAnnotation, FoldSplit, MosTarget};
use crate::error::CoreError;
use crate::features::FeatureStore;
use crate::model::Dimension;
use crate::objectives::TrainMode;
use crate::stats::{
    bca_interval, cohens_q, kendall_tau_b, pearson, spearman, CorrEstimate, CorrKind,
};
use crate::toy::ToyAttentionEncoder;
use crate::trainer::{train, EncoderInput, TrainConfig, TrainedModel};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Bootstrap settings shared by every reported CI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapParams {
    pub b: u32,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams {
            b: 1000,
            level: 0.95,
            seed: 42,
        }
    }
}

/// One scored test clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub system_id: String,
    pub fold: u32,
    pub pred_mi: f64,
    pub pred_ta: f64,
    pub mos_mi: f64,
    pub mos_ta: f64,
}

impl ClipPrediction {
    pub fn pred(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Mi => self.pred_mi,
            Dimension::Ta => self.pred_ta,
        }
    }

    pub fn mos(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Mi => self.mos_mi,
            Dimension::Ta => self.mos_ta,
        }
    }
}

/// PCC and SRCC for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimCorr {
    pub pcc: CorrEstimate,
    pub srcc: CorrEstimate,
}

/// Utterance-level correlations on one fold's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub fold: u32,
    pub n_clips: usize,
    pub mi: DimCorr,
    pub ta: DimCorr,
}

/// Per-system aggregate for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMean {
    pub system_id: String,
    pub pred_mean: f64,
    pub human_mean: f64,
    pub n_clips: usize,
}

/// System-level correlations over per-system mean pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub systems: Vec<SystemMean>,
    pub srcc: CorrEstimate,
    pub pcc: CorrEstimate,
    pub tau: CorrEstimate,
    /// Folds whose test predictions fed the means (for comparability checks).
    pub folds: Vec<u32>,
}

/// One progressive-ablation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub label: String,
    pub delta_srcc: f64,
    pub cohens_q: f64,
    pub meets_threshold: bool,
}

/// Pre-registered practical-significance threshold on system-level SRCC.
pub const ABLATION_THRESHOLD: f64 = 0.02;

/// Point estimate plus BCa interval over paired data.
fn corr_estimate(
    kind: CorrKind,
    x: &[f64],
    y: &[f64],
    boot: &BootstrapParams,
    stream: u64,
) -> Result<CorrEstimate, CoreError> {
    let f = match kind {
        CorrKind::Pcc => pearson,
        CorrKind::Srcc => spearman,
        CorrKind::Tau => kendall_tau_b,
    };
    let value = f(x, y)?;
    let data: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    let ci = if data.len() >= 8 {
        let stat = |d: &[(f64, f64)]| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = d.iter().copied().unzip();
            f(&xs, &ys)
        };
        Some(bca_interval(
            &data,
            stat,
            boot.b,
            boot.level,
            crate::derive_seed(boot.seed, stream),
        )?)
    } else {
        None
    };
    Ok(CorrEstimate {
        kind,
        value,
        n: x.len(),
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        bootstrap_b: ci.map(|_| boot.b),
        seed: ci.map(|_| boot.seed),
    })
}

fn dim_corr(
    preds: &[ClipPrediction],
    dim: Dimension,
    boot: &BootstrapParams,
    stream: u64,
) -> Result<DimCorr, CoreError> {
    let x: Vec<f64> = preds.iter().map(|p| p.pred(dim)).collect();
    let y: Vec<f64> = preds.iter().map(|p| p.mos(dim)).collect();
    Ok(DimCorr {
        pcc: corr_estimate(CorrKind::Pcc, &x, &y, boot, stream)?,
        srcc: corr_estimate(CorrKind::Srcc, &x, &y, boot, stream + 1)?,
    })
}

/// Scores a fold's test set and computes the utterance-level report. The
/// per-clip predictions are returned for cross-fold system aggregation.
pub fn evaluate_fold(
    tm: &TrainedModel,
    encoder: Option<&ToyAttentionEncoder>,
    store: &dyn FeatureStore,
    fold: &FoldSplit,
    targets: &[MosTarget],
    systems: &BTreeMap<String, String>,
    boot: &BootstrapParams,
) -> Result<(UtteranceReport, Vec<ClipPrediction>), CoreError> {
    if fold.test_ids.is_empty() {
        return Err(CoreError::Incomplete("fold has no test clips".into()));
    }
    let target_map: BTreeMap<&str, &MosTarget> =
        targets.iter().map(|t| (t.clip_id.as_str(), t)).collect();
    let mut preds = Vec::with_capacity(fold.test_ids.len());
    for id in &fold.test_ids {
        let t = target_map
            .get(id.as_str())
            .ok_or_else(|| CoreError::Incomplete(format!("no MOS target for test clip {id}")))?;
        let system_id = systems
            .get(id)
            .ok_or_else(|| CoreError::Incomplete(format!("no system id for test clip {id}")))?
            .clone();
        let frames = store.get(id)?.frames;
        let scores = tm.predict_clip(encoder, &frames)?;
        preds.push(ClipPrediction {
            clip_id: id.clone(),
            system_id,
            fold: fold.fold_index,
            pred_mi: scores[&Dimension::Mi],
            pred_ta: scores[&Dimension::Ta],
            mos_mi: t.mi,
            mos_ta: t.ta,
        });
    }
    let stream = u64::from(fold.fold_index) * 10;
    let report = UtteranceReport {
        fold: fold.fold_index,
        n_clips: preds.len(),
        mi: dim_corr(&preds, Dimension::Mi, boot, stream)?,
        ta: dim_corr(&preds, Dimension::Ta, boot, stream + 2)?,
    };
    Ok((report, preds))
}

/// Per-system mean pairs for one dimension, sorted by system id.
pub fn system_means(preds: &[ClipPrediction], dim: Dimension) -> Vec<SystemMean> {
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for p in preds {
        let e = acc.entry(p.system_id.as_str()).or_insert((0.0, 0.0, 0));
        e.0 += p.pred(dim);
        e.1 += p.mos(dim);
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(sys, (ps, hs, n))| SystemMean {
            system_id: sys.to_string(),
            pred_mean: ps / n as f64,
            human_mean: hs / n as f64,
            n_clips: n,
        })
        .collect()
}

/// Correlations over the per-system mean pairs, resampling systems for the
/// CIs.
pub fn system_level(
    means: &[SystemMean],
    folds: &[u32],
    boot: &BootstrapParams,
) -> Result<SystemReport, CoreError> {
    if means.len() < 3 {
        return Err(CoreError::InvalidInput(format!(
            "system-level correlation needs >= 3 systems, got {}",
            means.len()
        )));
    }
    let x: Vec<f64> = means.iter().map(|m| m.pred_mean).collect();
    let y: Vec<f64> = means.iter().map(|m| m.human_mean).collect();
    Ok(SystemReport {
        systems: means.to_vec(),
        srcc: corr_estimate(CorrKind::Srcc, &x, &y, boot, 1000)?,
        pcc: corr_estimate(CorrKind::Pcc, &x, &y, boot, 1001)?,
        tau: corr_estimate(CorrKind::Tau, &x, &y, boot, 1002)?,
        folds: folds.to_vec(),
    })
}

/// Delta and effect size of report `b` over report `a` (same folds).
pub fn ablation_compare(
    label: &str,
    a: &SystemReport,
    b: &SystemReport,
) -> Result<AblationDelta, CoreError> {
    if a.folds != b.folds {
        return Err(CoreError::InvalidInput(format!(
            "ablation step {label}: reports cover different folds ({:?} vs {:?})",
            a.folds, b.folds
        )));
    }
    let delta = b.srcc.value - a.srcc.value;
    Ok(AblationDelta {
        label: label.to_string(),
        delta_srcc: delta,
        cohens_q: cohens_q(b.srcc.value, a.srcc.value),
        meets_threshold: delta >= ABLATION_THRESHOLD,
    })
}

// ---- degradation concordance -------------------------------------------

/// Concordance of one (kind, severity) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceCell {
    pub kind: DegradationKind,
    pub severity: Severity,
    /// Fraction of pairs where the original scored strictly higher.
    pub fraction: f64,
    pub n_pairs: usize,
    /// False when any selected clip lacked a degraded score.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub cells: Vec<ConcordanceCell>,
    /// Mean of the per-cell fractions.
    pub overall_mean: f64,
    pub n_clips: usize,
    pub incomplete_cells: usize,
}

/// Clip ids forming the top quartile by score, ties broken by id. The count
/// is ceil(n / 4).
pub fn top_quartile(scores: &[(String, f64)]) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    let k = scores.len().div_ceil(4);
    order.iter().take(k).map(|(id, _)| id.clone()).collect()
}

/// Per-cell fraction of (original, degraded) score pairs with the original
/// strictly higher. `original` maps clip id to the original's MI score;
/// `degraded` holds one score map per (kind, severity) cell.
pub fn degradation_concordance(
    original: &BTreeMap<String, f64>,
    degraded: &BTreeMap<(DegradationKind, Severity), BTreeMap<String, f64>>,
) -> Result<ConcordanceReport, CoreError> {
    if original.is_empty() {
        return Err(CoreError::InvalidInput("no original scores".into()));
    }
    if degraded.is_empty() {
        return Err(CoreError::InvalidInput("no degraded score cells".into()));
    }
    let mut cells = Vec::with_capacity(degraded.len());
    let mut incomplete = 0usize;
    for (&(kind, severity), scores) in degraded {
        let mut wins = 0usize;
        let mut pairs = 0usize;
        let mut complete = true;
        for (id, &orig) in original {
            match scores.get(id) {
                Some(&deg) => {
                    pairs += 1;
                    if orig > deg {
                        wins += 1;
                    }
                }
                None => complete = false,
            }
        }
        if !complete {
            incomplete += 1;
        }
        let fraction = if pairs > 0 {
            wins as f64 / pairs as f64
        } else {
            f64::NAN
        };
        cells.push(ConcordanceCell {
            kind,
            severity,
            fraction,
            n_pairs: pairs,
            complete,
        });
    }
    let defined: Vec<f64> = cells
        .iter()
        .map(|c| c.fraction)
        .filter(|f| f.is_finite())
        .collect();
    let overall_mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(ConcordanceReport {
        cells,
        overall_mean,
        n_clips: original.len(),
        incomplete_cells: incomplete,
    })
}

// ---- data-efficiency sweep ---------------------------------------------

/// One sweep cell: a (mode, size) training run scored on the fold's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: TrainMode,
    /// None means the full training split.
    pub n: Option<usize>,
    pub srcc: f64,
    pub pcc: f64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Smallest n where the second mode's SRCC beats the first mode at 2n.
    pub crossover: Option<usize>,
}

/// Trains one run per (mode, size) on nested subsamples of the fold's train
/// split and scores utterance-level MI on its test set. Failed runs become
/// marked cells; the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn data_efficiency_sweep(
    encoder: &EncoderInput,
    store: &dyn FeatureStore,
    fold: &FoldSplit,
    annotations: &[ClipAnnotation],
    targets: &[MosTarget],
    modes: &[TrainMode],
    sizes: &[Option<usize>],
    base_cfg: &TrainConfig,
    timer: &mut dyn FnMut() -> f64,
) -> SweepTable {
    let target_map: BTreeMap<&str, &MosTarget> =
        targets.iter().map(|t| (t.clip_id.as_str(), t)).collect();
    let mut cells = Vec::with_capacity(modes.len() * sizes.len());
    for &mode in modes {
        for &n in sizes {
            let mut cfg = base_cfg.clone();
            cfg.mode = mode;
            let outcome = run_sweep_cell(encoder, store, fold, annotations, &target_map, &cfg, n, timer);
            cells.push(match outcome {
                Ok((srcc, pcc)) => SweepCell {
                    mode,
                    n,
                    srcc,
                    pcc,
                    ok: true,
                    error: None,
                },
                Err(e) => SweepCell {
                    mode,
                    n,
                    srcc: f64::NAN,
                    pcc: f64::NAN,
                    ok: false,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let crossover = find_crossover(&cells, modes);
    SweepTable { cells, crossover }
}

fn run_sweep_cell(
    encoder: &EncoderInput,
    store: &dyn FeatureStore,
    fold: &FoldSplit,
    annotations: &[ClipAnnotation],
    target_map: &BTreeMap<&str, &MosTarget>,
    cfg: &TrainConfig,
    n: Option<usize>,
    timer: &mut dyn FnMut() -> f64,
) -> Result<(f64, f64), CoreError> {
    let sub;
    let fold_ref = match n {
        Some(n) => {
            sub = subsample_train(fold, annotations, n, cfg.seed)?;
            &sub
        }
        None => fold,
    };
    let targets: Vec<MosTarget> = target_map.values().map(|t| (*t).clone()).collect();
    let (tm, _) = train(encoder.reborrow(), store, fold_ref, &targets, cfg, timer)?;
    let enc = match encoder {
        EncoderInput::Adaptable(e) => Some(*e),
        EncoderInput::Frozen(_) => None,
    };
    let mut x = Vec::with_capacity(fold.test_ids.len());
    let mut y = Vec::with_capacity(fold.test_ids.len());
    for id in &fold.test_ids {
        let t = target_map
            .get(id.as_str())
            .ok_or_else(|| CoreError::Incomplete(format!("no MOS target for test clip {id}")))?;
        let frames = store.get(id)?.frames;
        let scores = tm.predict_clip(enc, &frames)?;
        x.push(scores[&Dimension::Mi]);
        y.push(t.mi);
    }
    Ok((spearman(&x, &y)?, pearson(&x, &y)?))
}

/// Smallest n where modes[1] at n strictly exceeds modes[0] at 2n.
fn find_crossover(cells: &[SweepCell], modes: &[TrainMode]) -> Option<usize> {
    if modes.len() < 2 {
        return None;
    }
    let lookup = |mode: TrainMode, n: usize| -> Option<f64> {
        cells
            .iter()
            .find(|c| c.mode == mode && c.n == Some(n) && c.ok)
            .map(|c| c.srcc)
    };
    let mut ns: Vec<usize> = cells.iter().filter_map(|c| c.n).collect();
    ns.sort_unstable();
    ns.dedup();
    for &n in &ns {
        if let (Some(b), Some(a)) = (lookup(modes[1], n), lookup(modes[0], 2 * n)) {
            if b > a {
                return Some(n);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::DegradationSpec;
    use alloc::vec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn preds_from(scores: &[(&str, &str, f64, f64)]) -> Vec<ClipPrediction> {
        // (clip, system, pred_mi, mos_mi); TA mirrors MI
        scores
            .iter()
            .map(|(c, s, p, m)| ClipPrediction {
                clip_id: c.to_string(),
                system_id: s.to_string(),
                fold: 0,
                pred_mi: *p,
                pred_ta: *p,
                mos_mi: *m,
                mos_ta: *m,
            })
            .collect()
    }

    fn boot_small() -> BootstrapParams {
        BootstrapParams {
            b: 200,
            level: 0.95,
            seed: 42,
        }
    }

    #[test]
    fn oracle_predictions_are_perfect() {
        let mut rows = Vec::new();
        for i in 0..12 {
            let m = 1.0 + 0.3 * i as f64;
            rows.push((format!("c{i}"), format!("s{}", i % 4), m, m));
        }
        let preds: Vec<ClipPrediction> = rows
            .iter()
            .map(|(c, s, p, m)| ClipPrediction {
                clip_id: c.clone(),
                system_id: s.clone(),
                fold: 0,
                pred_mi: *p,
                pred_ta: *p,
                mos_mi: *m,
                mos_ta: *m,
            })
            .collect();
        let dc = dim_corr(&preds, Dimension::Mi, &boot_small(), 0).unwrap();
        assert!((dc.pcc.value - 1.0).abs() < 1e-12);
        assert!((dc.srcc.value - 1.0).abs() < 1e-12);
        assert!(dc.srcc.ci_low.unwrap() <= dc.srcc.value);
        assert!(dc.srcc.ci_high.unwrap() >= dc.srcc.value - 1e-12);

        // anti-oracle
        let anti: Vec<ClipPrediction> = preds
            .iter()
            .map(|p| ClipPrediction {
                pred_mi: -p.mos_mi,
                pred_ta: -p.mos_ta,
                ..p.clone()
            })
            .collect();
        let dc = dim_corr(&anti, Dimension::Mi, &boot_small(), 0).unwrap();
        assert!((dc.srcc.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn system_means_aggregate_exactly() {
        let preds = preds_from(&[
            ("a", "s1", 2.0, 3.0),
            ("b", "s1", 4.0, 5.0),
            ("c", "s2", 1.0, 1.0),
        ]);
        let means = system_means(&preds, Dimension::Mi);
        assert_eq!(means.len(), 2);
        assert_eq!(means[0].system_id, "s1");
        assert!((means[0].pred_mean - 3.0).abs() < 1e-12);
        assert!((means[0].human_mean - 4.0).abs() < 1e-12);
        assert_eq!(means[0].n_clips, 2);
    }

    #[test]
    fn system_level_swap_matches_rank_formula() {
        // 31 systems, two adjacent ranks swapped in the prediction ordering
        let mut means = Vec::new();
        for i in 0..31 {
            let human = 1.0 + i as f64 * 0.1;
            let pred = match i {
                10 => 1.0 + 11.0 * 0.1,
                11 => 1.0 + 10.0 * 0.1,
                _ => human,
            };
            means.push(SystemMean {
                system_id: format!("s{i:02}"),
                pred_mean: pred,
                human_mean: human,
                n_clips: 1,
            });
        }
        let rep = system_level(&means, &[0], &boot_small()).unwrap();
        // Spearman with one adjacent swap: 1 - 6 * 2 / (31 * 960)
        let expect = 1.0 - 6.0 * 2.0 / (31.0 * 960.0);
        assert!((rep.srcc.value - expect).abs() < 1e-12);
        assert!(rep.tau.value < 1.0 && rep.tau.value > 0.9);

        // identical vectors
        for m in &mut means {
            m.pred_mean = m.human_mean;
        }
        let rep = system_level(&means, &[0], &boot_small()).unwrap();
        assert!((rep.srcc.value - 1.0).abs() < 1e-12);
        assert!((rep.pcc.value - 1.0).abs() < 1e-12);
        assert!((rep.tau.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn system_level_needs_three_systems() {
        let means = vec![
            SystemMean {
                system_id: "a".into(),
                pred_mean: 1.0,
                human_mean: 1.0,
                n_clips: 1,
            },
            SystemMean {
                system_id: "b".into(),
                pred_mean: 2.0,
                human_mean: 2.0,
                n_clips: 1,
            },
        ];
        assert!(system_level(&means, &[0], &boot_small()).is_err());
    }

    fn report_with_srcc(v: f64, folds: &[u32]) -> SystemReport {
        let est = |kind| CorrEstimate {
            kind,
            value: v,
            n: 31,
            ci_low: None,
            ci_high: None,
            bootstrap_b: None,
            seed: None,
        };
        SystemReport {
            systems: Vec::new(),
            srcc: est(CorrKind::Srcc),
            pcc: est(CorrKind::Pcc),
            tau: est(CorrKind::Tau),
            folds: folds.to_vec(),
        }
    }

    #[test]
    fn ablation_deltas_match_published_srccs() {
        let folds = [0u32, 1, 2, 3, 4];
        let a1 = report_with_srcc(0.957, &folds);
        let a2 = report_with_srcc(0.953, &folds);
        let d = ablation_compare("A2-A1", &a1, &a2).unwrap();
        assert!((d.delta_srcc + 0.004).abs() < 1e-12);
        assert!((d.cohens_q - 0.0455).abs() < 0.01);
        assert!(!d.meets_threshold);

        let a3a = report_with_srcc(0.960, &folds);
        let d = ablation_compare("A3a-A2", &a2, &a3a).unwrap();
        assert!((d.delta_srcc - 0.007).abs() < 1e-12);
        assert!((d.cohens_q - 0.082).abs() < 0.01);

        let same = ablation_compare("X-X", &a1, &a1).unwrap();
        assert_eq!(same.delta_srcc, 0.0);
        assert_eq!(same.cohens_q, 0.0);
        assert!(!same.meets_threshold);

        let other = report_with_srcc(0.9, &[0]);
        assert!(ablation_compare("bad", &a1, &other).is_err());
    }

    #[test]
    fn top_quartile_counts_and_ordering() {
        let scores: Vec<(String, f64)> = (0..10)
            .map(|i| (format!("c{i}"), i as f64))
            .collect();
        let top = top_quartile(&scores);
        assert_eq!(top.len(), 3); // ceil(10/4)
        assert_eq!(top, vec!["c9", "c8", "c7"]);
    }

    #[test]
    fn concordance_trivial_and_chance_cases() {
        let mut original = BTreeMap::new();
        let mut cell = BTreeMap::new();
        for i in 0..114 {
            let id = format!("c{i:03}");
            original.insert(id.clone(), 3.0 + (i % 7) as f64 * 0.1);
            cell.insert(id, 2.0 + (i % 7) as f64 * 0.1);
        }
        let mut degraded = BTreeMap::new();
        degraded.insert((DegradationKind::Mp3, Severity::Severe), cell.clone());
        let rep = degradation_concordance(&original, &degraded).unwrap();
        assert_eq!(rep.cells.len(), 1);
        assert_eq!(rep.cells[0].fraction, 1.0);
        assert_eq!(rep.cells[0].n_pairs, 114);
        assert!(rep.cells[0].complete);
        assert_eq!(rep.overall_mean, 1.0);

        // random scores hover near chance
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_orig = BTreeMap::new();
        let mut rand_cell = BTreeMap::new();
        for i in 0..114 {
            let id = format!("c{i:03}");
            rand_orig.insert(id.clone(), rng.random_range(1.0..5.0));
            rand_cell.insert(id, rng.random_range(1.0..5.0));
        }
        let mut degraded = BTreeMap::new();
        degraded.insert((DegradationKind::Noise, Severity::Mild), rand_cell);
        let rep = degradation_concordance(&rand_orig, &degraded).unwrap();
        assert!((rep.overall_mean - 0.5).abs() < 0.1, "{}", rep.overall_mean);
    }

    #[test]
    fn concordance_marks_incomplete_cells() {
        let mut original = BTreeMap::new();
        for i in 0..8 {
            original.insert(format!("c{i}"), 4.0);
        }
        let mut cell = BTreeMap::new();
        for i in 0..6 {
            cell.insert(format!("c{i}"), 3.0);
        }
        let mut degraded = BTreeMap::new();
        degraded.insert((DegradationKind::Tempo, Severity::Moderate), cell);
        let rep = degradation_concordance(&original, &degraded).unwrap();
        assert!(!rep.cells[0].complete);
        assert_eq!(rep.cells[0].n_pairs, 6);
        assert_eq!(rep.incomplete_cells, 1);
        // ties count as failures
        let mut tie_cell = BTreeMap::new();
        for i in 0..8 {
            tie_cell.insert(format!("c{i}"), 4.0);
        }
        let mut degraded = BTreeMap::new();
        degraded.insert((DegradationKind::Pitch, Severity::Mild), tie_cell);
        let rep = degradation_concordance(&original, &degraded).unwrap();
        assert_eq!(rep.cells[0].fraction, 0.0);
    }

    #[test]
    fn identity_degradations_are_rejected_upstream() {
        // the spec type flags identities; the harness must refuse them
        let spec = DegradationSpec {
            kind: DegradationKind::Tempo,
            severity: Severity::Mild,
            parameter: 1.0,
        };
        assert!(spec.is_identity());
    }

    #[test]
    fn crossover_detection() {
        let mk = |mode, n: usize, srcc: f64| SweepCell {
            mode,
            n: Some(n),
            srcc,
            pcc: srcc,
            ok: true,
            error: None,
        };
        let cells = vec![
            mk(TrainMode::A1, 100, 0.60),
            mk(TrainMode::A1, 200, 0.70),
            mk(TrainMode::A1, 400, 0.80),
            mk(TrainMode::A3a, 100, 0.65),
            mk(TrainMode::A3a, 200, 0.82),
            mk(TrainMode::A3a, 400, 0.85),
        ];
        // A3a@100 (0.65) < A1@200 (0.70); A3a@200 (0.82) > A1@400 (0.80)
        assert_eq!(
            find_crossover(&cells, &[TrainMode::A1, TrainMode::A3a]),
            Some(200)
        );
        assert_eq!(find_crossover(&cells, &[TrainMode::A1]), None);
    }
}
