//! Manifest CSV ingestion and fold-split JSON files.
//!
//! Manifest header: `clip_id,audio_path,system_id,prompt_text,mi_1..mi_5,
//! ta_1..ta_5`. Empty rating cells are permitted only beyond the first per
//! dimension. Fold splits serialize as `{fold, train, val, test, seed}`.

use anyhow::{anyhow, bail, Context, Result};
use clef_core::dataset::{validate_annotations, ClipAnnotation, FoldSplit};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const RATINGS_PER_DIM: usize = 5;

fn expected_header() -> Vec<String> {
    let mut h = vec![
        "clip_id".to_string(),
        "audio_path".to_string(),
        "system_id".to_string(),
        "prompt_text".to_string(),
    ];
    for i in 1..=RATINGS_PER_DIM {
        h.push(format!("mi_{i}"));
    }
    for i in 1..=RATINGS_PER_DIM {
        h.push(format!("ta_{i}"));
    }
    h
}

fn parse_ratings(cells: &[&str], dim: &str, line: u64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let cell = cell.trim();
        if cell.is_empty() {
            if i == 0 {
                bail!("line {line}: first {dim} rating must not be empty");
            }
            // Empty cells beyond the first mark absent raters.
            continue;
        }
        let v: i64 = cell
            .parse()
            .map_err(|_| anyhow!("line {line}: {dim}_{} rating {cell:?} is not an integer", i + 1))?;
        if !(1..=5).contains(&v) {
            bail!("line {line}: {dim}_{} rating {v} outside [1,5]", i + 1);
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// Parses and validates a manifest CSV. Rows with missing audio files are
/// kept; `missing_audio` lists them so callers can fail loudly instead of
/// silently shrinking the dataset.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipAnnotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .with_context(|| format!("open manifest {}", path.display()))?;
    let header: Vec<String> = reader
        .headers()
        .context("read manifest header")?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = expected_header();
    if header != expected {
        bail!(
            "manifest header mismatch: got {:?}, expected {:?}",
            header.join(","),
            expected.join(",")
        );
    }

    let mut annotations = Vec::new();
    for record in reader.records() {
        let record = record.context("read manifest row")?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            bail!(
                "line {line}: {} fields, expected {}",
                record.len(),
                expected.len()
            );
        }
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        let clip_id = cell(0).to_string();
        if clip_id.is_empty() {
            bail!("line {line}: empty clip_id");
        }
        let mi_cells: Vec<&str> = (4..4 + RATINGS_PER_DIM).map(cell).collect();
        let ta_cells: Vec<&str> = (4 + RATINGS_PER_DIM..4 + 2 * RATINGS_PER_DIM)
            .map(cell)
            .collect();
        let ann = ClipAnnotation {
            clip_id,
            audio_path: cell(1).to_string(),
            system_id: cell(2).to_string(),
            prompt_text: match cell(3) {
                "" => None,
                p => Some(p.to_string()),
            },
            ratings_mi: parse_ratings(&mi_cells, "mi", line)?,
            ratings_ta: parse_ratings(&ta_cells, "ta", line)?,
        };
        ann.validate()
            .map_err(|e| anyhow!("line {line}: {e}"))?;
        annotations.push(ann);
    }
    validate_annotations(&annotations).map_err(|e| anyhow!("manifest integrity: {e}"))?;
    Ok(annotations)
}

/// Audio paths from the manifest that do not exist on disk, resolved
/// relative to the manifest's directory when not absolute.
pub fn missing_audio(manifest_path: &Path, annotations: &[ClipAnnotation]) -> Vec<String> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    annotations
        .iter()
        .filter(|a| !resolve_audio(base, &a.audio_path).is_file())
        .map(|a| a.audio_path.clone())
        .collect()
}

/// Resolves one manifest audio path against the manifest directory.
pub fn resolve_audio(manifest_dir: &Path, audio_path: &str) -> std::path::PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Writes a manifest CSV (used by the synthetic dataset generator).
pub fn write_manifest(path: &Path, annotations: &[ClipAnnotation]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(expected_header())?;
    for a in annotations {
        let mut row = vec![
            a.clip_id.clone(),
            a.audio_path.clone(),
            a.system_id.clone(),
            a.prompt_text.clone().unwrap_or_default(),
        ];
        for dim in [&a.ratings_mi, &a.ratings_ta] {
            for i in 0..RATINGS_PER_DIM {
                row.push(dim.get(i).map_or(String::new(), |r| r.to_string()));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// System id per clip, for stratified reporting.
pub fn system_map(annotations: &[ClipAnnotation]) -> BTreeMap<String, String> {
    annotations
        .iter()
        .map(|a| (a.clip_id.clone(), a.system_id.clone()))
        .collect()
}

// ---- fold JSON -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FoldFile {
    fold: u32,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
    seed: u64,
}

/// Writes `fold_<i>.json` files into `dir`.
pub fn save_folds(dir: &Path, folds: &[FoldSplit]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in folds {
        let file = FoldFile {
            fold: f.fold_index,
            train: f.train_ids.clone(),
            val: f.val_ids.clone(),
            test: f.test_ids.clone(),
            seed: f.seed,
        };
        let path = dir.join(format!("fold_{}.json", f.fold_index));
        let mut json = serde_json::to_string_pretty(&file)?;
        json.push('\n');
        std::fs::write(path, json)?;
    }
    Ok(())
}

/// Loads every `fold_<i>.json` under `dir`, ordered by fold index.
pub fn load_folds(dir: &Path) -> Result<Vec<FoldSplit>> {
    let mut folds = Vec::new();
    for i in 0u32.. {
        let path = dir.join(format!("fold_{i}.json"));
        if !path.is_file() {
            break;
        }
        let file: FoldFile = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .with_context(|| format!("parse {}", path.display()))?;
        if file.fold != i {
            bail!("{}: holds fold {} not {i}", path.display(), file.fold);
        }
        folds.push(FoldSplit {
            fold_index: file.fold,
            train_ids: file.train,
            val_ids: file.val,
            test_ids: file.test,
            seed: file.seed,
        });
    }
    if folds.is_empty() {
        bail!("no fold files under {}", dir.display());
    }
    Ok(folds)
}
