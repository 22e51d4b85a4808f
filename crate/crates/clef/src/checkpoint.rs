//! Single-file checkpoints: JSON metadata block followed by named
//! little-endian f32 tensor blobs and a trailing CRC32.
//!
//! Layout: magic `CLEF`, format version u16, u32 metadata length, metadata
//! JSON (which lists every tensor with its shape, in file order), the blobs,
//! then a CRC32 over everything after the magic+version.

use anyhow::{anyhow, bail, Context, Result};
use clef_core::linalg::Mat;
use clef_core::model::{
    AttentionPool, Dimension, HeadMode, LoraDelta, LoraPair, PredictionHead, Projection,
    QualityModel,
};
use clef_core::objectives::{TrainMode, UncertaintyState};
use clef_core::toy::LayerWeights;
use clef_core::trainer::TrainedModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CLEF";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

/// Provenance and reconstruction metadata embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub encoder_id: String,
    pub mode: String,
    pub head_mode: String,
    pub centers: Vec<f64>,
    /// Fingerprint of the training configuration that produced this model.
    pub config_hash: String,
    pub seed: u64,
    pub fold: u32,
    lora: Option<(usize, f32)>,
    tensors: Vec<TensorInfo>,
}

fn head_mode_str(m: HeadMode) -> &'static str {
    match m {
        HeadMode::Regression => "regression",
        HeadMode::Ordinal => "ordinal",
    }
}

fn parse_head_mode(s: &str) -> Result<HeadMode> {
    match s {
        "regression" => Ok(HeadMode::Regression),
        "ordinal" => Ok(HeadMode::Ordinal),
        other => bail!("unknown head mode {other:?}"),
    }
}

fn parse_projection(s: &str) -> Result<Projection> {
    Projection::ALL
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| anyhow!("unknown projection {s:?}"))
}

/// Tensor list in file order: pool, heads, uncertainty, LoRA, encoder.
fn tensor_plan(tm: &TrainedModel) -> Vec<(String, usize, usize, Vec<f32>)> {
    let m = &tm.model;
    let mut out: Vec<(String, usize, usize, Vec<f32>)> = Vec::new();
    out.push(("pool.w".into(), 1, m.pool.w.len(), m.pool.w.clone()));
    for (dim, head) in &m.heads {
        let d = dim.as_str();
        let mat = |m: &Mat| (m.rows(), m.cols(), m.data().to_vec());
        let (r, c, v) = mat(&head.w1);
        out.push((format!("head.{d}.w1"), r, c, v));
        out.push((format!("head.{d}.b1"), 1, head.b1.len(), head.b1.clone()));
        let (r, c, v) = mat(&head.w2);
        out.push((format!("head.{d}.w2"), r, c, v));
        out.push((format!("head.{d}.b2"), 1, head.b2.len(), head.b2.clone()));
    }
    if let Some(unc) = &tm.unc {
        let s: Vec<f32> = unc.s.values().map(|&v| v as f32).collect();
        out.push(("unc.s".into(), 1, s.len(), s));
    }
    if let Some(lora) = &m.lora {
        for ((layer, proj), pair) in &lora.pairs {
            let p = proj.as_str();
            out.push((
                format!("lora.{layer}.{p}.a"),
                pair.a.rows(),
                pair.a.cols(),
                pair.a.data().to_vec(),
            ));
            out.push((
                format!("lora.{layer}.{p}.b"),
                pair.b.rows(),
                pair.b.cols(),
                pair.b.data().to_vec(),
            ));
        }
    }
    if let Some(enc) = &tm.encoder_weights {
        for (layer, w) in enc.iter().enumerate() {
            for proj in Projection::ALL {
                let m = w.get(proj);
                out.push((
                    format!("enc.{layer}.{}", proj.as_str()),
                    m.rows(),
                    m.cols(),
                    m.data().to_vec(),
                ));
            }
        }
    }
    out
}

/// Extra provenance supplied by the caller at save time.
pub struct SaveInfo<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
    pub fold: u32,
}

/// Serializes a trained model, writing atomically via a temp file.
pub fn save_checkpoint(tm: &TrainedModel, info: &SaveInfo, path: &Path) -> Result<()> {
    let plan = tensor_plan(tm);
    let meta = CheckpointMeta {
        code_version: crate::VERSION.into(),
        encoder_id: tm.model.encoder_spec.encoder_id.clone(),
        mode: tm.mode.as_str().into(),
        head_mode: head_mode_str(tm.model.head_mode).into(),
        centers: tm.model.centers.clone(),
        config_hash: info.config_hash.into(),
        seed: info.seed,
        fold: info.fold,
        lora: tm.model.lora.as_ref().map(|l| (l.rank, l.alpha)),
        tensors: plan
            .iter()
            .map(|(name, rows, cols, _)| TensorInfo {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;

    let mut body = Vec::new();
    body.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    body.extend_from_slice(&meta_json);
    for (_, _, _, data) in &plan {
        for &v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&body)?;
        f.write_all(&crc.to_le_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("rename into {}", path.display()))?;
    Ok(())
}

/// Reads a checkpoint back into a `TrainedModel` plus its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(TrainedModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).with_context(|| format!("read {}", path.display()))?;
    if bytes.len() < 14 {
        bail!("{}: truncated checkpoint", path.display());
    }
    if &bytes[..4] != MAGIC {
        bail!("{}: bad checkpoint magic", path.display());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        bail!(
            "{}: checkpoint format v{version} needs migration (this build reads v{FORMAT_VERSION})",
            path.display()
        );
    }
    let body = &bytes[6..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        bail!("{}: checkpoint CRC mismatch", path.display());
    }

    let meta_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if 4 + meta_len > body.len() {
        bail!("{}: metadata overruns file", path.display());
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[4..4 + meta_len])
        .with_context(|| format!("{}: metadata parse", path.display()))?;

    let mut tensors: BTreeMap<String, Mat> = BTreeMap::new();
    let mut pos = 4 + meta_len;
    for info in &meta.tensors {
        let n = info.rows * info.cols * 4;
        if pos + n > body.len() {
            bail!("{}: tensor {} overruns file", path.display(), info.name);
        }
        let data: Vec<f32> = body[pos..pos + n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(info.name.clone(), Mat::from_vec(info.rows, info.cols, data));
        pos += n;
    }
    if pos != body.len() {
        bail!("{}: trailing bytes after tensors", path.display());
    }

    rebuild(meta, tensors, path)
}

fn take(tensors: &mut BTreeMap<String, Mat>, name: &str, path: &Path) -> Result<Mat> {
    tensors
        .remove(name)
        .ok_or_else(|| anyhow!("{}: missing tensor {name}", path.display()))
}

fn rebuild(
    meta: CheckpointMeta,
    mut tensors: BTreeMap<String, Mat>,
    path: &Path,
) -> Result<(TrainedModel, CheckpointMeta)> {
    let mode = TrainMode::parse(&meta.mode).map_err(|e| anyhow!("{e}"))?;
    let head_mode = parse_head_mode(&meta.head_mode)?;
    let encoder_spec = clef_core::features::EncoderSpec::by_id(&meta.encoder_id)
        .ok_or_else(|| anyhow!("{}: unknown encoder {}", path.display(), meta.encoder_id))?;

    let pool_w = take(&mut tensors, "pool.w", path)?;
    let mut heads = BTreeMap::new();
    for dim in Dimension::ALL {
        let d = dim.as_str();
        heads.insert(
            dim,
            PredictionHead {
                w1: take(&mut tensors, &format!("head.{d}.w1"), path)?,
                b1: take(&mut tensors, &format!("head.{d}.b1"), path)?.data().to_vec(),
                w2: take(&mut tensors, &format!("head.{d}.w2"), path)?,
                b2: take(&mut tensors, &format!("head.{d}.b2"), path)?.data().to_vec(),
            },
        );
    }

    let unc = if let Some(s) = tensors.remove("unc.s") {
        let vals = s.data();
        if vals.len() != Dimension::ALL.len() {
            bail!("{}: unc.s has {} entries", path.display(), vals.len());
        }
        let mut st = UncertaintyState::default();
        for (dim, &v) in Dimension::ALL.iter().zip(vals) {
            st.s.insert(*dim, f64::from(v));
        }
        Some(st)
    } else {
        None
    };

    let lora = if let Some((rank, alpha)) = meta.lora {
        let mut pairs = BTreeMap::new();
        let names: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with("lora."))
            .cloned()
            .collect();
        for name in names {
            let parts: Vec<&str> = name.split('.').collect();
            if parts.len() != 4 {
                bail!("{}: malformed tensor name {name}", path.display());
            }
            let layer: u32 = parts[1].parse().context("lora layer index")?;
            let proj = parse_projection(parts[2])?;
            let m = tensors.remove(&name).unwrap();
            let pair = pairs.entry((layer, proj)).or_insert_with(|| LoraPair {
                a: Mat::zeros(0, 0),
                b: Mat::zeros(0, 0),
            });
            match parts[3] {
                "a" => pair.a = m,
                "b" => pair.b = m,
                other => bail!("{}: unknown lora part {other:?}", path.display()),
            }
        }
        Some(LoraDelta { rank, alpha, pairs })
    } else {
        None
    };

    let encoder_weights = {
        let mut layers: Vec<LayerWeights> = Vec::new();
        for layer in 0.. {
            if !tensors.contains_key(&format!("enc.{layer}.q")) {
                break;
            }
            let mut w = LayerWeights {
                wq: Mat::zeros(0, 0),
                wk: Mat::zeros(0, 0),
                wv: Mat::zeros(0, 0),
                wo: Mat::zeros(0, 0),
            };
            for proj in Projection::ALL {
                *w.get_mut(proj) =
                    take(&mut tensors, &format!("enc.{layer}.{}", proj.as_str()), path)?;
            }
            layers.push(w);
        }
        if layers.is_empty() {
            None
        } else {
            Some(layers)
        }
    };

    if !tensors.is_empty() {
        let extra: Vec<&String> = tensors.keys().collect();
        bail!("{}: unexpected tensors {extra:?}", path.display());
    }

    let model = QualityModel {
        pool: AttentionPool {
            w: pool_w.data().to_vec(),
        },
        heads,
        lora,
        head_mode,
        encoder_spec,
        centers: meta.centers.clone(),
    };
    Ok((
        TrainedModel {
            model,
            unc,
            encoder_weights,
            mode,
        },
        meta,
    ))
}

/// Guards against scoring with a checkpoint trained for another encoder.
pub fn check_encoder(meta: &CheckpointMeta, expected: &str) -> Result<()> {
    if meta.encoder_id != expected {
        bail!(
            "checkpoint was trained for encoder {} but {expected} was requested",
            meta.encoder_id
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clef_core::features::EncoderSpec;
    use clef_core::model::{LORA_ALPHA, LORA_RANK};

    fn dummy(mode: TrainMode) -> TrainedModel {
        let head_mode = mode.head_mode();
        let mut model = QualityModel::new(EncoderSpec::toy(), head_mode, 5);
        if mode.uses_lora() {
            model = model.with_lora(2, LORA_RANK, LORA_ALPHA, 6);
        }
        let unc = mode.uses_uncertainty().then(UncertaintyState::default);
        TrainedModel {
            model,
            unc,
            encoder_weights: None,
            mode,
        }
    }

    fn info() -> SaveInfo<'static> {
        SaveInfo {
            config_hash: "abc123",
            seed: 7,
            fold: 0,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        for mode in [TrainMode::A1, TrainMode::A2, TrainMode::A3c] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.clef");
            let tm = dummy(mode);
            save_checkpoint(&tm, &info(), &path).unwrap();
            let (loaded, meta) = load_checkpoint(&path).unwrap();
            assert_eq!(loaded, tm, "mode {}", mode.as_str());
            assert_eq!(meta.config_hash, "abc123");
            assert_eq!(meta.mode, mode.as_str());
        }
    }

    #[test]
    fn round_trip_scores_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clef");
        let tm = dummy(TrainMode::A1);
        save_checkpoint(&tm, &info(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let frames = Mat::from_vec(3, 64, (0..192).map(|i| (i as f32).sin()).collect());
        let a = tm.predict_clip(None, &frames).unwrap();
        let b = loaded.predict_clip(None, &frames).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_and_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clef");
        save_checkpoint(&dummy(TrainMode::A1), &info(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bit flip in a tensor blob.
        let n = bytes.len();
        bytes[n - 100] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("CRC"));
        // Future format version.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        // Restore the flipped bit so only the version differs.
        bytes[n - 100] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("migration"), "{err}");
    }

    #[test]
    fn encoder_mismatch_refused() {
        let meta_ok = CheckpointMeta {
            code_version: crate::VERSION.into(),
            encoder_id: "toy".into(),
            mode: "a1".into(),
            head_mode: "regression".into(),
            centers: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            config_hash: "x".into(),
            seed: 0,
            fold: 0,
            lora: None,
            tensors: vec![],
        };
        assert!(check_encoder(&meta_ok, "toy").is_ok());
        assert!(check_encoder(&meta_ok, "muq-310m").is_err());
    }

    #[test]
    fn size_tracks_parameter_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clef");
        let tm = dummy(TrainMode::A1);
        save_checkpoint(&tm, &info(), &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        let params = tm.model.param_count();
        // 4 bytes per parameter plus a bounded metadata block.
        assert!(size >= params * 4, "{size} < {}", params * 4);
        assert!(size < params * 4 + 4096, "{size} metadata overhead");
    }
}
