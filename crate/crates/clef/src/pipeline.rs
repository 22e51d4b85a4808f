//! Command implementations behind the CLI: extract, train, evaluate, score,
//! ablate, degrade, sweep, and report assembly. Each command is idempotent
//! with respect to completed outputs (skip-if-exists, `force` overrides).

use anyhow::{anyhow, bail, Context, Result};
use clef_core::audio::DegradationSpec;
use clef_core::dataset::{aggregate_targets, make_folds, FoldSplit, MosTarget};
use clef_core::eval::{
    degradation_concordance, evaluate_fold, system_level, system_means, top_quartile,
    ablation_compare, data_efficiency_sweep, ClipPrediction, SystemReport,
};
use clef_core::features::FeatureStore;
use clef_core::model::{clamp_mos, Dimension};
use clef_core::objectives::TrainMode;
use clef_core::stats::{spearman, steiger_test};
use clef_core::trainer::{train, TrainLog, TrainedModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::audio::load_and_normalize;
use crate::cache::{cache_get, cache_put};
use crate::checkpoint::{check_encoder, load_checkpoint, save_checkpoint, SaveInfo};
use crate::config::RunConfig;
use crate::encoder::{preload, Backend};
use crate::manifest::{load_manifest, missing_audio, resolve_audio, system_map};
use crate::report::{
    fold_summary, read_json, write_ablation_csv, write_concordance_csv, write_json,
    write_predictions_csv, write_sweep_csv, write_system_csv, write_utterance_csv,
    AblationBundle, ConcordanceBundle, EvaluationBundle, Provenance, Seeds, SteigerRow,
    SweepBundle,
};

/// Manifest-derived inputs shared by most commands.
pub struct Dataset {
    pub annotations: Vec<clef_core::dataset::ClipAnnotation>,
    pub targets: Vec<MosTarget>,
    pub folds: Vec<FoldSplit>,
    pub systems: BTreeMap<String, String>,
}

/// Loads the manifest and the persisted fold files, creating the folds on
/// first use so later commands see the identical split.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let annotations = load_manifest(&cfg.manifest)?;
    let targets = aggregate_targets(&annotations).map_err(|e| anyhow!("{e}"))?;
    let systems = system_map(&annotations);

    let fold_dir = cfg.hash_dir().join("folds");
    let folds = if fold_dir.join("fold_0.json").is_file() {
        let folds = crate::manifest::load_folds(&fold_dir)?;
        if folds.len() != cfg.folds.n_folds as usize {
            bail!(
                "{} fold files under {} but config asks for {}",
                folds.len(),
                fold_dir.display(),
                cfg.folds.n_folds
            );
        }
        folds
    } else {
        let folds = make_folds(
            &annotations,
            cfg.folds.n_folds,
            cfg.folds.val_fraction,
            cfg.folds.seed,
        )
        .map_err(|e| anyhow!("{e}"))?;
        crate::manifest::save_folds(&fold_dir, &folds)?;
        folds
    };
    Ok(Dataset {
        annotations,
        targets,
        folds,
        systems,
    })
}

fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    Ok(Provenance {
        config_hash: cfg.config_hash(),
        code_version: crate::VERSION.into(),
        mode: cfg.mode.clone(),
        encoder: cfg.encoder.clone(),
        seeds: Seeds {
            train: cfg.train_config()?.seed,
            folds: cfg.folds.seed,
            bootstrap: cfg.bootstrap.seed,
        },
    })
}

// ---- extract -------------------------------------------------------------

/// Outcome of one cache-population pass.
#[derive(Debug, Serialize)]
pub struct ExtractSummary {
    pub hits: usize,
    pub extracted: usize,
    /// (clip_id, reason) for every clip that could not be featurized.
    pub failures: Vec<(String, String)>,
}

/// Populates the feature cache for every manifest clip.
pub fn cmd_extract(cfg: &RunConfig, force: bool) -> Result<ExtractSummary> {
    let annotations = load_manifest(&cfg.manifest)?;
    let missing = missing_audio(&cfg.manifest, &annotations);
    if !missing.is_empty() {
        bail!(
            "{} audio files missing:\n  {}",
            missing.len(),
            missing.join("\n  ")
        );
    }
    let backend = Backend::for_id(&cfg.encoder)?;
    let cache_root = cfg.cache_root();
    let manifest_dir = cfg.manifest.parent().unwrap_or_else(|| Path::new("."));

    let mut summary = ExtractSummary {
        hits: 0,
        extracted: 0,
        failures: Vec::new(),
    };
    for ann in &annotations {
        if !force {
            match cache_get(&ann.clip_id, &cfg.encoder, &cache_root) {
                Ok(Some(_)) => {
                    summary.hits += 1;
                    continue;
                }
                Ok(None) => {}
                Err(e) => {
                    // Corrupt entry: report and re-extract below.
                    summary.failures.push((ann.clip_id.clone(), format!("{e:#}")));
                }
            }
        }
        let result = (|| -> Result<()> {
            let path = resolve_audio(manifest_dir, &ann.audio_path);
            let clip = load_and_normalize(
                &path,
                cfg.target_sample_rate,
                cfg.target_seconds,
                &ann.clip_id,
            )?;
            let features = backend.extract(&clip)?;
            cache_put(&features, &cache_root)
        })();
        match result {
            Ok(()) => summary.extracted += 1,
            Err(e) => summary.failures.push((ann.clip_id.clone(), format!("{e:#}"))),
        }
    }
    // A corrupt entry that re-extracted cleanly is no longer a failure.
    summary
        .failures
        .retain(|(id, _)| cache_get(id, &cfg.encoder, &cache_root).ok().flatten().is_none());
    Ok(summary)
}

// ---- train ---------------------------------------------------------------

fn fold_dir(cfg: &RunConfig, fold: u32) -> PathBuf {
    cfg.mode_dir().join(format!("fold{fold}"))
}

fn checkpoint_path(cfg: &RunConfig, fold: u32) -> PathBuf {
    fold_dir(cfg, fold).join("checkpoint.clef")
}

#[derive(Serialize, Deserialize)]
struct TrainLogFile {
    provenance: Provenance,
    fold: u32,
    log: TrainLog,
}

/// Trains the requested fold (or all folds), writing one checkpoint and
/// training log per fold. Existing checkpoints are skipped unless `force`.
pub fn cmd_train(cfg: &RunConfig, only_fold: Option<u32>, force: bool) -> Result<Vec<PathBuf>> {
    let tc = cfg.train_config()?;
    let backend = Backend::for_id(&cfg.encoder)?;
    let ds = load_dataset(cfg)?;
    let prov = provenance(cfg)?;
    let cache_root = cfg.cache_root();

    let mut written = Vec::new();
    for fold in &ds.folds {
        if let Some(k) = only_fold {
            if fold.fold_index != k {
                continue;
            }
        }
        let ckpt = checkpoint_path(cfg, fold.fold_index);
        if ckpt.is_file() && !force {
            written.push(ckpt);
            continue;
        }
        let ids = fold.train_ids.iter().chain(fold.val_ids.iter());
        let store = preload(&cache_root, &cfg.encoder, ids)?;
        let t0 = Instant::now();
        let mut timer = move || t0.elapsed().as_secs_f64();
        let (tm, log) = train(
            backend.encoder_input(),
            &store,
            fold,
            &ds.targets,
            &tc,
            &mut timer,
        )
        .map_err(|e| anyhow!("fold {}: {e}", fold.fold_index))?;
        save_checkpoint(
            &tm,
            &SaveInfo {
                config_hash: &prov.config_hash,
                seed: tc.seed,
                fold: fold.fold_index,
            },
            &ckpt,
        )?;
        write_json(
            &fold_dir(cfg, fold.fold_index).join("train_log.json"),
            &TrainLogFile {
                provenance: prov.clone(),
                fold: fold.fold_index,
                log,
            },
        )?;
        written.push(ckpt);
    }
    if let Some(k) = only_fold {
        if written.is_empty() {
            bail!("fold {k} does not exist (config has {})", cfg.folds.n_folds);
        }
    }
    Ok(written)
}

// ---- evaluate ------------------------------------------------------------

fn load_fold_model(cfg: &RunConfig, fold: u32) -> Result<TrainedModel> {
    let path = checkpoint_path(cfg, fold);
    if !path.is_file() {
        bail!(
            "missing checkpoint for fold {fold} ({}); run `clef train` first",
            path.display()
        );
    }
    let (tm, meta) = load_checkpoint(&path)?;
    check_encoder(&meta, &cfg.encoder)?;
    let want = TrainMode::parse(&cfg.mode).map_err(|e| anyhow!("{e}"))?;
    if TrainMode::parse(&meta.mode).ok() != Some(want) {
        bail!(
            "checkpoint for fold {fold} was trained in mode {} but {} was requested",
            meta.mode,
            cfg.mode
        );
    }
    Ok(tm)
}

/// Evaluates every fold's checkpoint, producing the report bundle plus the
/// pooled per-clip predictions.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    force: bool,
) -> Result<(EvaluationBundle, Vec<ClipPrediction>)> {
    let report_path = cfg.mode_dir().join("report.json");
    let preds_path = cfg.mode_dir().join("predictions.csv");
    if report_path.is_file() && !force {
        let bundle: EvaluationBundle = read_json(&report_path)?;
        return Ok((bundle, Vec::new()));
    }

    let backend = Backend::for_id(&cfg.encoder)?;
    let ds = load_dataset(cfg)?;
    let prov = provenance(cfg)?;
    let cache_root = cfg.cache_root();

    let mut utterance = Vec::new();
    let mut all_preds: Vec<ClipPrediction> = Vec::new();
    let mut per_fold_sys: Vec<SystemReport> = Vec::new();
    for fold in &ds.folds {
        let tm = load_fold_model(cfg, fold.fold_index)?;
        let store = preload(&cache_root, &cfg.encoder, fold.test_ids.iter())?;
        let (rep, preds) = evaluate_fold(
            &tm,
            backend.attention_encoder(),
            &store,
            fold,
            &ds.targets,
            &ds.systems,
            &cfg.bootstrap,
        )
        .map_err(|e| anyhow!("fold {}: {e}", fold.fold_index))?;
        let sys = system_level(
            &system_means(&preds, Dimension::Mi),
            &[fold.fold_index],
            &cfg.bootstrap,
        )
        .map_err(|e| anyhow!("fold {} system level: {e}", fold.fold_index))?;
        per_fold_sys.push(sys);
        utterance.push(rep);
        all_preds.extend(preds);
    }

    let fold_ids: Vec<u32> = ds.folds.iter().map(|f| f.fold_index).collect();
    let pooled = system_level(
        &system_means(&all_preds, Dimension::Mi),
        &fold_ids,
        &cfg.bootstrap,
    )
    .map_err(|e| anyhow!("pooled system level: {e}"))?;

    let bundle = EvaluationBundle {
        provenance: prov.clone(),
        utterance_mi_srcc: fold_summary(utterance.iter().map(|u| u.mi.srcc.value)),
        utterance_ta_srcc: fold_summary(utterance.iter().map(|u| u.ta.srcc.value)),
        system_srcc_folds: fold_summary(per_fold_sys.iter().map(|s| s.srcc.value)),
        utterance,
        system_pooled: pooled,
        system_per_fold: per_fold_sys,
    };
    write_json(&report_path, &bundle)?;
    write_utterance_csv(&cfg.mode_dir().join("utterance.csv"), &bundle)?;
    write_system_csv(&cfg.mode_dir().join("system.csv"), &bundle)?;
    write_predictions_csv(&preds_path, &prov, &all_preds)?;
    Ok((bundle, all_preds))
}

// ---- score ---------------------------------------------------------------

/// One scored file (clamped to the reporting range) with wall time.
pub struct ScoreLine {
    pub path: PathBuf,
    pub mi: f64,
    pub ta: f64,
    pub millis: f64,
}

/// Scores audio files with a checkpoint. Per-file failures are collected so
/// a batch keeps going; the caller decides the exit status.
pub fn cmd_score(
    checkpoint: &Path,
    files: &[PathBuf],
    target_sample_rate: u32,
    target_seconds: f64,
) -> Result<(Vec<ScoreLine>, Vec<(PathBuf, String)>)> {
    let (tm, meta) = load_checkpoint(checkpoint)?;
    let backend = Backend::for_id(&meta.encoder_id)?;
    if !backend.can_extract() {
        bail!(
            "checkpoint uses encoder {}, which this binary cannot run; score via cached features instead",
            meta.encoder_id
        );
    }
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for file in files {
        let t0 = Instant::now();
        let result = (|| -> Result<ScoreLine> {
            let clip = load_and_normalize(
                file,
                target_sample_rate,
                target_seconds,
                &file.display().to_string(),
            )?;
            let features = backend.extract(&clip)?;
            let scores = tm
                .predict_clip(backend.attention_encoder(), &features.frames)
                .map_err(|e| anyhow!("{e}"))?;
            Ok(ScoreLine {
                path: file.clone(),
                mi: clamp_mos(scores[&Dimension::Mi]),
                ta: clamp_mos(scores[&Dimension::Ta]),
                millis: t0.elapsed().as_secs_f64() * 1e3,
            })
        })();
        match result {
            Ok(line) => lines.push(line),
            Err(e) => failures.push((file.clone(), format!("{e:#}"))),
        }
    }
    Ok((lines, failures))
}

// ---- ablate --------------------------------------------------------------

/// Canonical progressive-ablation order.
pub const ABLATION_LADDER: [&str; 6] = ["a1", "a2", "a3a", "a3b", "a3c", "a4"];

fn mode_report(cfg: &RunConfig, mode: &str) -> PathBuf {
    cfg.output_root
        .join(cfg.config_hash())
        .join(mode)
        .join("report.json")
}

/// Compares evaluation bundles across modes: SRCC deltas with Cohen's q and
/// the practical threshold, plus Williams-Steiger tests under Bonferroni.
pub fn cmd_ablate(cfg: &RunConfig, modes: &[String]) -> Result<AblationBundle> {
    if modes.len() < 2 {
        bail!("ablation needs at least 2 modes, got {}", modes.len());
    }
    let mut bundles: Vec<(String, EvaluationBundle)> = Vec::new();
    for mode in modes {
        TrainMode::parse(mode).map_err(|e| anyhow!("{e}"))?;
        let path = mode_report(cfg, mode);
        if !path.is_file() {
            bail!(
                "no evaluation report for mode {mode} ({}); run `clef evaluate --mode {mode}`",
                path.display()
            );
        }
        bundles.push((mode.clone(), read_json(&path)?));
    }

    let n_steps = bundles.len() - 1;
    let alpha_adj = 0.05 / n_steps as f64;
    let mut steps = Vec::with_capacity(n_steps);
    let mut steiger = Vec::with_capacity(n_steps);
    for pair in bundles.windows(2) {
        let (prev_mode, prev) = &pair[0];
        let (next_mode, next) = &pair[1];
        let label = format!("{next_mode}-{prev_mode}");
        let step = ablation_compare(&label, &prev.system_pooled, &next.system_pooled)
            .map_err(|e| anyhow!("{e}"))?;

        // r23: correlation between the two metrics' per-system predictions.
        let a = &prev.system_pooled.systems;
        let b = &next.system_pooled.systems;
        if a.len() != b.len()
            || a.iter().zip(b).any(|(x, y)| x.system_id != y.system_id)
        {
            bail!("ablation step {label}: system lists differ between reports");
        }
        let pa: Vec<f64> = a.iter().map(|s| s.pred_mean).collect();
        let pb: Vec<f64> = b.iter().map(|s| s.pred_mean).collect();
        let r23 = spearman(&pa, &pb).map_err(|e| anyhow!("ablation step {label}: {e}"))?;
        let r12 = next.system_pooled.srcc.value;
        let r13 = prev.system_pooled.srcc.value;
        // Perfect correlations make the test statistic undefined; record the
        // row without a verdict instead of failing the whole comparison.
        let (result, note) = match steiger_test(r12, r13, r23, a.len(), alpha_adj) {
            Ok(t) => (Some(t), None),
            Err(clef_core::CoreError::Singularity(msg)) => (None, Some(msg)),
            Err(e) => return Err(anyhow!("ablation step {label}: {e}")),
        };
        steiger.push(SteigerRow {
            comparison: label,
            r12,
            r13,
            r23,
            n: a.len(),
            result,
            note,
            alpha_adj,
        });
        steps.push(step);
    }

    let mut prov = provenance(cfg)?;
    prov.mode = modes.join("+");
    let bundle = AblationBundle {
        provenance: prov,
        steps,
        steiger,
    };
    write_json(&cfg.hash_dir().join("ablation.json"), &bundle)?;
    write_ablation_csv(&cfg.hash_dir().join("ablation.csv"), &bundle)?;
    Ok(bundle)
}

// ---- degrade -------------------------------------------------------------

/// Degradation concordance on the top quartile of the configured fold's
/// test clips, writing the degraded WAV tree next to the report.
pub fn cmd_degrade(cfg: &RunConfig, force: bool) -> Result<ConcordanceBundle> {
    let out_path = cfg.mode_dir().join("concordance.json");
    if out_path.is_file() && !force {
        return read_json(&out_path);
    }
    let backend = Backend::for_id(&cfg.encoder)?;
    if !backend.can_extract() {
        bail!(
            "degradation testing needs a locally runnable encoder; {} is cache-only",
            cfg.encoder
        );
    }
    let ds = load_dataset(cfg)?;
    let fold = ds
        .folds
        .iter()
        .find(|f| f.fold_index == cfg.degrade.fold)
        .ok_or_else(|| anyhow!("degrade.fold {} does not exist", cfg.degrade.fold))?;
    let tm = load_fold_model(cfg, fold.fold_index)?;
    let manifest_dir = cfg.manifest.parent().unwrap_or_else(|| Path::new("."));
    let audio_paths: BTreeMap<&str, &str> = ds
        .annotations
        .iter()
        .map(|a| (a.clip_id.as_str(), a.audio_path.as_str()))
        .collect();

    // Score the fold's test clips from the cache, take the top quartile.
    let store = preload(&cfg.cache_root(), &cfg.encoder, fold.test_ids.iter())?;
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(fold.test_ids.len());
    for id in &fold.test_ids {
        let frames = store.get(id).map_err(|e| anyhow!("{e}"))?.frames;
        let scores = tm
            .predict_clip(backend.attention_encoder(), &frames)
            .map_err(|e| anyhow!("{e}"))?;
        scored.push((id.clone(), scores[&Dimension::Mi]));
    }
    let selected = top_quartile(&scored);
    let original: BTreeMap<String, f64> = scored
        .iter()
        .filter(|(id, _)| selected.contains(id))
        .map(|(id, s)| (id.clone(), *s))
        .collect();

    // Degrade each selected clip from its original audio, score through the
    // identical preprocessing path.
    let mut degraded = BTreeMap::new();
    for spec in DegradationSpec::standard_grid() {
        let mut cell: BTreeMap<String, f64> = BTreeMap::new();
        for id in &selected {
            let rel = audio_paths
                .get(id.as_str())
                .ok_or_else(|| anyhow!("clip {id} missing from manifest"))?;
            let clip = load_and_normalize(
                &resolve_audio(manifest_dir, rel),
                cfg.target_sample_rate,
                cfg.target_seconds,
                id,
            )?;
            let deg = crate::degrade::degrade_and_write(
                &clip,
                &spec,
                cfg.degrade.seed,
                &cfg.mode_dir(),
            )?;
            let features = backend.extract(&deg)?;
            let scores = tm
                .predict_clip(backend.attention_encoder(), &features.frames)
                .map_err(|e| anyhow!("{e}"))?;
            cell.insert(id.clone(), scores[&Dimension::Mi]);
        }
        degraded.insert((spec.kind, spec.severity), cell);
    }

    let report = degradation_concordance(&original, &degraded).map_err(|e| anyhow!("{e}"))?;
    let bundle = ConcordanceBundle {
        provenance: provenance(cfg)?,
        fold: fold.fold_index,
        selected_clips: selected.len(),
        report,
    };
    write_json(&out_path, &bundle)?;
    write_concordance_csv(&cfg.mode_dir().join("concordance.csv"), &bundle)?;
    Ok(bundle)
}

// ---- sweep ---------------------------------------------------------------

/// Data-efficiency sweep over (mode, training-set size) cells on one fold.
pub fn cmd_sweep(cfg: &RunConfig, force: bool) -> Result<SweepBundle> {
    let out_path = cfg.hash_dir().join("sweep.json");
    if out_path.is_file() && !force {
        return read_json(&out_path);
    }
    let backend = Backend::for_id(&cfg.encoder)?;
    let ds = load_dataset(cfg)?;
    let fold = ds
        .folds
        .iter()
        .find(|f| f.fold_index == cfg.sweep.fold)
        .ok_or_else(|| anyhow!("sweep.fold {} does not exist", cfg.sweep.fold))?;
    let modes: Vec<TrainMode> = cfg
        .sweep
        .modes
        .iter()
        .map(|m| TrainMode::parse(m).map_err(|e| anyhow!("{e}")))
        .collect::<Result<_>>()?;

    let ids = fold
        .train_ids
        .iter()
        .chain(fold.val_ids.iter())
        .chain(fold.test_ids.iter());
    let store = preload(&cfg.cache_root(), &cfg.encoder, ids)?;
    let base_cfg = cfg.train_config()?;
    let t0 = Instant::now();
    let mut timer = move || t0.elapsed().as_secs_f64();
    let table = data_efficiency_sweep(
        &backend.encoder_input(),
        &store,
        fold,
        &ds.annotations,
        &ds.targets,
        &modes,
        &cfg.sweep.sizes,
        &base_cfg,
        &mut timer,
    );

    let mut prov = provenance(cfg)?;
    prov.mode = cfg.sweep.modes.join("+");
    let bundle = SweepBundle {
        provenance: prov,
        fold: fold.fold_index,
        table,
    };
    write_json(&out_path, &bundle)?;
    write_sweep_csv(&cfg.hash_dir().join("sweep.csv"), &bundle)?;
    Ok(bundle)
}

// ---- report --------------------------------------------------------------

/// Index of every artifact present under `runs/<config-hash>/`.
#[derive(Debug, Serialize)]
pub struct RunIndex {
    pub config_hash: String,
    pub modes: Vec<String>,
    pub has_ablation: bool,
    pub has_sweep: bool,
    pub concordance_modes: Vec<String>,
}

/// Collects completed outputs into `summary.json` and returns the index.
pub fn cmd_report(cfg: &RunConfig) -> Result<RunIndex> {
    let mut modes = Vec::new();
    let mut concordance_modes = Vec::new();
    for mode in ABLATION_LADDER {
        if mode_report(cfg, mode).is_file() {
            modes.push(mode.to_string());
        }
        if cfg
            .output_root
            .join(cfg.config_hash())
            .join(mode)
            .join("concordance.json")
            .is_file()
        {
            concordance_modes.push(mode.to_string());
        }
    }
    if modes.is_empty() {
        bail!(
            "no evaluation reports under {}; run `clef evaluate` first",
            cfg.hash_dir().display()
        );
    }
    let index = RunIndex {
        config_hash: cfg.config_hash(),
        modes,
        has_ablation: cfg.hash_dir().join("ablation.json").is_file(),
        has_sweep: cfg.hash_dir().join("sweep.json").is_file(),
        concordance_modes,
    };
    write_json(&cfg.hash_dir().join("summary.json"), &index)
        .context("write run summary")?;
    Ok(index)
}
