//! Annotated-clip records, MOS target aggregation, stratified fold
//! construction, and training-set subsampling.
//!
//! All split operations are pure functions of (input, seed): systems are
//! visited in sorted order and every shuffle uses a seeded ChaCha stream.

use crate::derive_seed;
use crate::error::CoreError;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One manifest row: a generated clip with its per-rater scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub audio_path: String,
    pub system_id: String,
    pub prompt_text: Option<String>,
    /// Musical-impression ratings, integers in [1, 5].
    pub ratings_mi: Vec<u8>,
    /// Textual-alignment ratings, integers in [1, 5].
    pub ratings_ta: Vec<u8>,
}

impl ClipAnnotation {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.ratings_mi.is_empty() || self.ratings_ta.is_empty() {
            return Err(CoreError::InvalidInput(format!(
                "clip {} has an empty rating list",
                self.clip_id
            )));
        }
        for &r in self.ratings_mi.iter().chain(self.ratings_ta.iter()) {
            if !(1..=5).contains(&r) {
                return Err(CoreError::InvalidInput(format!(
                    "clip {}: rating {r} outside [1,5]",
                    self.clip_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-clip mean opinion scores, one per quality dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosTarget {
    pub clip_id: String,
    pub mi: f64,
    pub ta: f64,
}

/// A single cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: u32,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Checks that every annotation is valid and clip ids are unique.
pub fn validate_annotations(annotations: &[ClipAnnotation]) -> Result<(), CoreError> {
    let mut seen = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        a.validate()?;
        if let Some(prev) = seen.insert(a.clip_id.clone(), i) {
            return Err(CoreError::InvalidInput(format!(
                "duplicate clip_id {} (rows {prev} and {i})",
                a.clip_id
            )));
        }
    }
    Ok(())
}

/// Per-dimension arithmetic mean of the ratings, ordered by clip_id.
pub fn aggregate_targets(annotations: &[ClipAnnotation]) -> Result<Vec<MosTarget>, CoreError> {
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        a.validate()?;
        let mean = |rs: &[u8]| rs.iter().map(|&r| f64::from(r)).sum::<f64>() / rs.len() as f64;
        out.push(MosTarget {
            clip_id: a.clip_id.clone(),
            mi: mean(&a.ratings_mi),
            ta: mean(&a.ratings_ta),
        });
    }
    out.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(out)
}

fn group_by_system(annotations: &[ClipAnnotation]) -> BTreeMap<&str, Vec<&str>> {
    let mut by_system: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for a in annotations {
        by_system
            .entry(a.system_id.as_str())
            .or_default()
            .push(a.clip_id.as_str());
    }
    for clips in by_system.values_mut() {
        clips.sort_unstable();
    }
    by_system
}

/// Stratified k-fold split: per system, clips are shuffled under `seed` and
/// dealt round-robin into test buckets, so every system appears in every
/// fold's test set. A validation set is carved per system from the remaining
/// training clips at `val_fraction`.
pub fn make_folds(
    annotations: &[ClipAnnotation],
    n_folds: u32,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>, CoreError> {
    if n_folds < 2 {
        return Err(CoreError::InvalidInput(format!(
            "n_folds must be >= 2, got {n_folds}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CoreError::InvalidInput(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    validate_annotations(annotations)?;

    let by_system = group_by_system(annotations);
    for (system, clips) in &by_system {
        if clips.len() < n_folds as usize {
            return Err(CoreError::Stratification(format!(
                "system {system} has only {} clips for {n_folds} folds",
                clips.len()
            )));
        }
    }

    // Deal each system's shuffled clips round-robin into test buckets.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    // buckets[fold][system] -> test clips; shuffled[system] -> full order
    let mut test_buckets: Vec<Vec<&str>> = alloc::vec![Vec::new(); n_folds as usize];
    let mut shuffled: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (system, clips) in &by_system {
        let mut order = clips.clone();
        order.shuffle(&mut rng);
        for (i, clip) in order.iter().enumerate() {
            test_buckets[i % n_folds as usize].push(clip);
        }
        shuffled.insert(system, order);
    }

    let mut folds = Vec::with_capacity(n_folds as usize);
    for fold in 0..n_folds {
        let test: Vec<&str> = test_buckets[fold as usize].clone();
        let mut train: Vec<String> = Vec::new();
        let mut val: Vec<String> = Vec::new();
        let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + u64::from(fold)));
        for order in shuffled.values() {
            // remaining = this system's clips not dealt into this fold's test bucket
            let mut remaining: Vec<&str> = order
                .iter()
                .enumerate()
                .filter(|(i, _)| (i % n_folds as usize) as u32 != fold)
                .map(|(_, c)| *c)
                .collect();
            remaining.shuffle(&mut val_rng);
            let n_val = libm::round(val_fraction * remaining.len() as f64) as usize;
            for (i, clip) in remaining.iter().enumerate() {
                if i < n_val {
                    val.push(String::from(*clip));
                } else {
                    train.push(String::from(*clip));
                }
            }
        }
        let mut test: Vec<String> = test.iter().map(|c| String::from(*c)).collect();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(FoldSplit {
            fold_index: fold,
            train_ids: train,
            val_ids: val,
            test_ids: test,
            seed,
        });
    }
    Ok(folds)
}

/// Uniform subsample of the training ids without replacement, stratified by
/// system with largest-remainder rounding. Per-system samples are prefixes of
/// a seeded shuffle, so subsamples under the same seed are nested across
/// sizes whenever the per-system counts grow monotonically.
pub fn subsample_train(
    fold: &FoldSplit,
    annotations: &[ClipAnnotation],
    n: usize,
    seed: u64,
) -> Result<FoldSplit, CoreError> {
    let total = fold.train_ids.len();
    if n > total {
        return Err(CoreError::SubsampleSize(format!(
            "requested {n} clips from a training pool of {total}"
        )));
    }

    let system_of: BTreeMap<&str, &str> = annotations
        .iter()
        .map(|a| (a.clip_id.as_str(), a.system_id.as_str()))
        .collect();
    let mut pools: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for clip in &fold.train_ids {
        let system = system_of.get(clip.as_str()).ok_or_else(|| {
            CoreError::InvalidInput(format!("train clip {clip} not present in annotations"))
        })?;
        pools.entry(system).or_default().push(clip.as_str());
    }

    // Largest-remainder allocation of n across systems.
    let mut base: BTreeMap<&str, usize> = BTreeMap::new();
    let mut remainders: Vec<(&str, f64)> = Vec::new();
    let mut allocated = 0usize;
    for (system, pool) in &pools {
        let quota = n as f64 * pool.len() as f64 / total as f64;
        let b = libm::floor(quota) as usize;
        base.insert(system, b);
        allocated += b;
        remainders.push((system, quota - b as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
    for (system, _) in remainders.iter().take(n - allocated) {
        *base.get_mut(system).expect("allocated system") += 1;
    }

    let mut train: Vec<String> = Vec::with_capacity(n);
    for (system, pool) in &pools {
        let mut order = pool.clone();
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, crate::hash_str(system)));
        order.shuffle(&mut rng);
        for clip in order.iter().take(base[system]) {
            train.push(String::from(*clip));
        }
    }
    train.sort_unstable();
    debug_assert_eq!(train.len(), n);

    Ok(FoldSplit {
        fold_index: fold.fold_index,
        train_ids: train,
        val_ids: fold.val_ids.clone(),
        test_ids: fold.test_ids.clone(),
        seed,
    })
}
