//! On-disk feature cache.
//!
//! One file per (encoder, clip): magic `MQEV`, version u16, then a header
//! {encoder_id len+bytes, clip_id len+bytes, L u32, d u32, frame_rate f32},
//! the L x d matrix as little-endian f32 row-major, and a trailing CRC32
//! over everything after the magic+version. Writes go to a temp file in the
//! same directory and are renamed into place, so concurrent readers never
//! observe a partial file.

use anyhow::{anyhow, bail, Context, Result};
use clef_core::error::CoreError;
use clef_core::features::{FeatureMatrix, FeatureStore};
use clef_core::hash_str;
use clef_core::linalg::Mat;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"MQEV";
const VERSION: u16 = 1;

/// Environment variable overriding the configured cache root.
pub const CACHE_ROOT_ENV: &str = "CLEF_CACHE_ROOT";

/// Cache root after applying the environment override.
pub fn effective_cache_root(configured: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

fn sanitize(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == id {
        safe
    } else {
        // Avoid collisions between distinct ids that sanitize identically.
        format!("{safe}-{:016x}", hash_str(id))
    }
}

/// File path for one cache entry.
pub fn cache_path(root: &Path, encoder_id: &str, clip_id: &str) -> PathBuf {
    root.join(sanitize(encoder_id))
        .join(format!("{}.mqev", sanitize(clip_id)))
}

fn encode(features: &FeatureMatrix) -> Vec<u8> {
    let l = features.num_frames() as u32;
    let d = features.dim() as u32;
    let mut body: Vec<u8> = Vec::with_capacity(24 + (l * d) as usize * 4);
    let put_str = |body: &mut Vec<u8>, s: &str| {
        body.extend_from_slice(&(s.len() as u32).to_le_bytes());
        body.extend_from_slice(s.as_bytes());
    };
    put_str(&mut body, &features.encoder_id);
    put_str(&mut body, &features.clip_id);
    body.extend_from_slice(&l.to_le_bytes());
    body.extend_from_slice(&d.to_le_bytes());
    body.extend_from_slice(&features.frame_rate.to_le_bytes());
    for &v in features.frames.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&body);

    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("truncated cache file (wanted {n} bytes at offset {})", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            bail!("implausible string length {len} in cache header");
        }
        Ok(String::from_utf8(self.take(len)?.to_vec()).context("non-UTF8 cache header")?)
    }
}

fn decode(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 10 {
        bail!("truncated cache file ({} bytes)", bytes.len());
    }
    if &bytes[..4] != MAGIC {
        bail!("bad cache magic {:02x?}", &bytes[..4]);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        bail!("cache version {version}, expected {VERSION}");
    }
    let body = &bytes[6..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        bail!("cache CRC mismatch (stored {stored_crc:08x}, computed {crc:08x})");
    }

    let mut r = Reader { buf: body, pos: 0 };
    let encoder_id = r.string()?;
    let clip_id = r.string()?;
    let l = r.u32()? as usize;
    let d = r.u32()? as usize;
    let frame_rate = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let matrix_bytes = r.take(l * d * 4)?;
    if r.pos != body.len() {
        bail!("trailing bytes in cache file");
    }
    let data: Vec<f32> = matrix_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        frames: Mat::from_vec(l, d, data),
        frame_rate,
        encoder_id,
        clip_id,
    })
}

/// Stores one feature matrix, atomically replacing any existing entry.
pub fn cache_put(features: &FeatureMatrix, root: &Path) -> Result<()> {
    let path = cache_path(root, &features.encoder_id, &features.clip_id);
    let dir = path.parent().expect("cache path has a parent");
    fs::create_dir_all(dir)?;
    let bytes = encode(features);
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().unwrap().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path).with_context(|| format!("rename into {}", path.display()))?;
    Ok(())
}

/// Loads one entry. Returns `Ok(None)` when absent; corrupt files are an
/// error, never silent garbage.
pub fn cache_get(clip_id: &str, encoder_id: &str, root: &Path) -> Result<Option<FeatureMatrix>> {
    let path = cache_path(root, encoder_id, clip_id);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(anyhow!("read {}: {e}", path.display())),
    };
    let features =
        decode(&bytes).with_context(|| format!("corrupt cache file {}", path.display()))?;
    if features.clip_id != clip_id || features.encoder_id != encoder_id {
        bail!(
            "cache file {} holds ({}, {}), expected ({encoder_id}, {clip_id})",
            path.display(),
            features.encoder_id,
            features.clip_id
        );
    }
    Ok(Some(features))
}

/// `FeatureStore` view over one encoder's cache directory.
pub struct DiskFeatureStore {
    root: PathBuf,
    encoder_id: String,
}

impl DiskFeatureStore {
    pub fn new(root: impl Into<PathBuf>, encoder_id: impl Into<String>) -> Self {
        DiskFeatureStore {
            root: root.into(),
            encoder_id: encoder_id.into(),
        }
    }

    pub fn contains(&self, clip_id: &str) -> bool {
        cache_path(&self.root, &self.encoder_id, clip_id).is_file()
    }
}

impl FeatureStore for DiskFeatureStore {
    fn get(&self, clip_id: &str) -> Result<FeatureMatrix, CoreError> {
        match cache_get(clip_id, &self.encoder_id, &self.root) {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(CoreError::Incomplete(format!(
                "no cached features for clip {clip_id} (encoder {}); run `clef extract` first",
                self.encoder_id
            ))),
            Err(e) => Err(CoreError::InvalidInput(format!("{e:#}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(clip_id: &str) -> FeatureMatrix {
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        FeatureMatrix {
            frames: Mat::from_vec(3, 4, data),
            frame_rate: 50.0,
            encoder_id: "toy".into(),
            clip_id: clip_id.into(),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample("c1");
        cache_put(&f, dir.path()).unwrap();
        let g = cache_get("c1", "toy", dir.path()).unwrap().unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn absent_key_is_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cache_get("nope", "toy", dir.path()).unwrap().is_none());
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample("c2");
        cache_put(&f, dir.path()).unwrap();
        let path = cache_path(dir.path(), "toy", "c2");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(cache_get("c2", "toy", dir.path()).is_err());
    }

    #[test]
    fn flipped_bit_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample("c3");
        cache_put(&f, dir.path()).unwrap();
        let path = cache_path(dir.path(), "toy", "c3");
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = cache_get("c3", "toy", dir.path()).unwrap_err();
        assert!(format!("{err:#}").contains("corrupt"), "{err:#}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), "toy", "c4");
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, b"NOPE\x01\x00rest").unwrap();
        assert!(cache_get("c4", "toy", dir.path()).is_err());
    }

    #[test]
    fn disk_store_reports_missing_with_hint() {
        let dir = tempfile::tempdir().unwrap();
        let store = DiskFeatureStore::new(dir.path(), "muq-310m");
        let err = store.get("clip9").unwrap_err();
        assert!(err.to_string().contains("clef extract"), "{err}");
    }

    #[test]
    fn awkward_ids_stay_collision_free() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample("x/y");
        a.clip_id = "x/y".into();
        let mut b = sample("x:y");
        b.clip_id = "x:y".into();
        cache_put(&a, dir.path()).unwrap();
        cache_put(&b, dir.path()).unwrap();
        assert_eq!(cache_get("x/y", "toy", dir.path()).unwrap().unwrap(), a);
        assert_eq!(cache_get("x:y", "toy", dir.path()).unwrap().unwrap(), b);
    }

    #[test]
    fn env_override_wins() {
        let configured = PathBuf::from("/configured");
        std::env::remove_var(CACHE_ROOT_ENV);
        assert_eq!(effective_cache_root(&configured), configured);
        std::env::set_var(CACHE_ROOT_ENV, "/elsewhere");
        assert_eq!(effective_cache_root(&configured), PathBuf::from("/elsewhere"));
        std::env::remove_var(CACHE_ROOT_ENV);
    }
}
