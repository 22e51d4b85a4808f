//! Report assembly and emission: JSON for machines, CSV tables for reading.
//! Every artifact carries a provenance header (config hash, code version,
//! seeds) and no timestamps, so identical runs produce identical bytes.

use anyhow::{Context, Result};
use clef_core::eval::{
    AblationDelta, ClipPrediction, ConcordanceReport, SweepTable, SystemReport, UtteranceReport,
};
use clef_core::stats::SteigerResult;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Seeds that shaped a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub folds: u64,
    pub bootstrap: u64,
}

/// Identification block present in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub mode: String,
    pub encoder: String,
    pub seeds: Seeds,
}

impl Provenance {
    fn csv_header(&self) -> String {
        format!(
            "# config_hash={} code_version={} mode={} encoder={} seeds=train:{},folds:{},bootstrap:{}\n",
            self.config_hash,
            self.code_version,
            self.mode,
            self.encoder,
            self.seeds.train,
            self.seeds.folds,
            self.seeds.bootstrap
        )
    }
}

/// Mean and standard deviation over folds of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: f64,
    pub sd: f64,
}

pub fn fold_summary(values: impl IntoIterator<Item = f64>) -> FoldSummary {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    FoldSummary { mean, sd }
}

/// The full evaluation output of one (config, mode) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationBundle {
    pub provenance: Provenance,
    pub utterance: Vec<UtteranceReport>,
    pub utterance_mi_srcc: FoldSummary,
    pub utterance_ta_srcc: FoldSummary,
    /// System means pooled over every fold's test predictions.
    pub system_pooled: SystemReport,
    /// Per-fold system-level correlations (the +- SD view).
    pub system_per_fold: Vec<SystemReport>,
    pub system_srcc_folds: FoldSummary,
}

/// One Steiger comparison row of the significance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteigerRow {
    pub comparison: String,
    pub r12: f64,
    pub r13: f64,
    pub r23: f64,
    pub n: usize,
    /// Absent when the correlation triple is degenerate (some |r| = 1); the
    /// note says why.
    pub result: Option<SteigerResult>,
    pub note: Option<String>,
    pub alpha_adj: f64,
}

/// Progressive-ablation output across modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBundle {
    pub provenance: Provenance,
    pub steps: Vec<AblationDelta>,
    pub steiger: Vec<SteigerRow>,
}

/// Degradation-concordance output plus its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceBundle {
    pub provenance: Provenance,
    pub fold: u32,
    /// Number of top-quartile clips actually selected (logged, not assumed).
    pub selected_clips: usize,
    pub report: ConcordanceReport,
}

/// Data-efficiency sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBundle {
    pub provenance: Provenance,
    pub fold: u32,
    pub table: SweepTable,
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).with_context(|| format!("rename into {}", path.display()))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Utterance-level table: one row per fold and dimension.
pub fn write_utterance_csv(path: &Path, bundle: &EvaluationBundle) -> Result<()> {
    let mut s = bundle.provenance.csv_header();
    s.push_str("fold,dimension,n_clips,srcc,srcc_ci_low,srcc_ci_high,pcc,pcc_ci_low,pcc_ci_high\n");
    for u in &bundle.utterance {
        for (dim, c) in [("mi", &u.mi), ("ta", &u.ta)] {
            writeln!(
                s,
                "{},{dim},{},{:.6},{},{},{:.6},{},{}",
                u.fold,
                u.n_clips,
                c.srcc.value,
                opt(c.srcc.ci_low),
                opt(c.srcc.ci_high),
                c.pcc.value,
                opt(c.pcc.ci_low),
                opt(c.pcc.ci_high),
            )?;
        }
    }
    writeln!(
        s,
        "mean_sd,mi,,{:.6},,,{:.6},,",
        bundle.utterance_mi_srcc.mean, bundle.utterance_mi_srcc.sd
    )?;
    writeln!(
        s,
        "mean_sd,ta,,{:.6},,,{:.6},,",
        bundle.utterance_ta_srcc.mean, bundle.utterance_ta_srcc.sd
    )?;
    write_atomic(path, s.as_bytes())
}

/// System-level table: pooled row, then per-fold rows.
pub fn write_system_csv(path: &Path, bundle: &EvaluationBundle) -> Result<()> {
    let mut s = bundle.provenance.csv_header();
    s.push_str("scope,n_systems,srcc,srcc_ci_low,srcc_ci_high,pcc,tau\n");
    let row = |s: &mut String, scope: &str, r: &SystemReport| {
        writeln!(
            s,
            "{scope},{},{:.6},{},{},{:.6},{:.6}",
            r.systems.len(),
            r.srcc.value,
            opt(r.srcc.ci_low),
            opt(r.srcc.ci_high),
            r.pcc.value,
            r.tau.value
        )
        .expect("string write");
    };
    row(&mut s, "pooled", &bundle.system_pooled);
    for r in &bundle.system_per_fold {
        let scope = format!("fold{}", r.folds.first().copied().unwrap_or(0));
        row(&mut s, &scope, r);
    }
    writeln!(
        s,
        "fold_mean_sd,,{:.6},,,{:.6},",
        bundle.system_srcc_folds.mean, bundle.system_srcc_folds.sd
    )?;
    write_atomic(path, s.as_bytes())
}

/// Per-clip predictions across all folds.
pub fn write_predictions_csv(
    path: &Path,
    prov: &Provenance,
    preds: &[ClipPrediction],
) -> Result<()> {
    let mut s = prov.csv_header();
    s.push_str("clip_id,system_id,fold,pred_mi,pred_ta,mos_mi,mos_ta\n");
    for p in preds {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            p.clip_id, p.system_id, p.fold, p.pred_mi, p.pred_ta, p.mos_mi, p.mos_ta
        )?;
    }
    write_atomic(path, s.as_bytes())
}

/// Ablation deltas plus the Steiger significance table.
pub fn write_ablation_csv(path: &Path, bundle: &AblationBundle) -> Result<()> {
    let mut s = bundle.provenance.csv_header();
    s.push_str("step,delta_srcc,cohens_q,meets_threshold\n");
    for d in &bundle.steps {
        writeln!(
            s,
            "{},{:+.6},{:.6},{}",
            d.label, d.delta_srcc, d.cohens_q, d.meets_threshold
        )?;
    }
    s.push_str("comparison,r12,r13,r23,n,z,p,q,significant,alpha_adj,note\n");
    for r in &bundle.steiger {
        let (z, p, q, sig) = r.result.as_ref().map_or(
            (String::new(), String::new(), String::new(), String::new()),
            |t| {
                (
                    format!("{:.4}", t.z),
                    format!("{:.6}", t.p),
                    format!("{:.6}", t.q),
                    t.significant.to_string(),
                )
            },
        );
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{},{z},{p},{q},{sig},{:.6},{}",
            r.comparison,
            r.r12,
            r.r13,
            r.r23,
            r.n,
            r.alpha_adj,
            r.note.clone().unwrap_or_default().replace(',', ";")
        )?;
    }
    write_atomic(path, s.as_bytes())
}

/// Concordance grid: kind x severity.
pub fn write_concordance_csv(path: &Path, bundle: &ConcordanceBundle) -> Result<()> {
    let mut s = bundle.provenance.csv_header();
    writeln!(s, "# fold={} selected_clips={}", bundle.fold, bundle.selected_clips)?;
    s.push_str("kind,severity,concordance,n_pairs,complete\n");
    for c in &bundle.report.cells {
        writeln!(
            s,
            "{},{},{:.6},{},{}",
            c.kind.as_str(),
            c.severity.as_str(),
            c.fraction,
            c.n_pairs,
            c.complete
        )?;
    }
    writeln!(s, "overall_mean,,{:.6},,", bundle.report.overall_mean)?;
    write_atomic(path, s.as_bytes())
}

/// Data-efficiency grid with the crossover annotation.
pub fn write_sweep_csv(path: &Path, bundle: &SweepBundle) -> Result<()> {
    let mut s = bundle.provenance.csv_header();
    writeln!(s, "# fold={}", bundle.fold)?;
    s.push_str("mode,n,srcc,pcc,ok,error\n");
    for c in &bundle.table.cells {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{},{}",
            c.mode.as_str(),
            c.n.map_or("full".to_string(), |n| n.to_string()),
            c.srcc,
            c.pcc,
            c.ok,
            c.error.clone().unwrap_or_default().replace(',', ";")
        )?;
    }
    writeln!(
        s,
        "crossover,{},,,,",
        bundle
            .table
            .crossover
            .map_or("none".to_string(), |n| n.to_string())
    )?;
    write_atomic(path, s.as_bytes())
}
