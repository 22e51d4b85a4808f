//! Run configuration: a single JSON document with a strict schema, hashed
//! into the output directory name so every experiment is reproducible and
//! collision-free.

use anyhow::{anyhow, bail, Context, Result};
use clef_core::eval::BootstrapParams;
use clef_core::features::EncoderSpec;
use clef_core::objectives::TrainMode;
use clef_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_cache_root() -> PathBuf {
    PathBuf::from("cache")
}

fn default_sample_rate() -> u32 {
    24_000
}

fn default_seconds() -> f64 {
    10.0
}

/// Fold plan: how the manifest splits into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    #[serde(default = "FoldPlan::default_n_folds")]
    pub n_folds: u32,
    #[serde(default = "FoldPlan::default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "FoldPlan::default_seed")]
    pub seed: u64,
}

impl FoldPlan {
    fn default_n_folds() -> u32 {
        5
    }
    fn default_val_fraction() -> f64 {
        0.15
    }
    fn default_seed() -> u64 {
        17
    }
}

impl Default for FoldPlan {
    fn default() -> Self {
        FoldPlan {
            n_folds: Self::default_n_folds(),
            val_fraction: Self::default_val_fraction(),
            seed: Self::default_seed(),
        }
    }
}

/// Optional overrides of the standard training recipe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub lr_heads: Option<f64>,
    pub lr_lora: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<u32>,
    pub patience: Option<u32>,
    pub grad_clip_norm: Option<f64>,
    pub precision: Option<String>,
}

/// Data-efficiency sweep plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    /// Exactly two modes: the baseline and the challenger whose crossover
    /// point is annotated.
    pub modes: Vec<String>,
    /// Training-set sizes; null means the full split.
    pub sizes: Vec<Option<usize>>,
    #[serde(default)]
    pub fold: u32,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            modes: vec!["a1".into(), "a3a".into()],
            sizes: vec![Some(100), Some(150), Some(250), Some(500), None],
            fold: 0,
        }
    }
}

/// Degradation-concordance plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradePlan {
    #[serde(default = "DegradePlan::default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub fold: u32,
}

impl DegradePlan {
    fn default_seed() -> u64 {
        99
    }
}

impl Default for DegradePlan {
    fn default() -> Self {
        DegradePlan {
            seed: Self::default_seed(),
            fold: 0,
        }
    }
}

/// The full experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub encoder: String,
    #[serde(default = "RunConfig::default_mode")]
    pub mode: String,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default = "default_cache_root")]
    pub cache_root: PathBuf,
    #[serde(default = "default_sample_rate")]
    pub target_sample_rate: u32,
    #[serde(default = "default_seconds")]
    pub target_seconds: f64,
    #[serde(default)]
    pub folds: FoldPlan,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "RunConfig::default_bootstrap")]
    pub bootstrap: BootstrapParams,
    #[serde(default)]
    pub sweep: SweepPlan,
    #[serde(default)]
    pub degrade: DegradePlan,
}

impl RunConfig {
    fn default_mode() -> String {
        "a1".into()
    }

    fn default_bootstrap() -> BootstrapParams {
        BootstrapParams::default()
    }

    /// Parses and validates a config file. Relative paths inside the config
    /// are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parse config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.output_root, &mut cfg.cache_root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_mode()?;
        self.encoder_spec()?;
        for m in &self.sweep.modes {
            TrainMode::parse(m).map_err(|e| anyhow!("sweep mode: {e}"))?;
        }
        if self.sweep.modes.len() != 2 {
            bail!("sweep.modes must list exactly 2 modes, got {}", self.sweep.modes.len());
        }
        if self.target_sample_rate == 0 || self.target_seconds <= 0.0 {
            bail!("target_sample_rate and target_seconds must be positive");
        }
        if self.folds.n_folds < 2 {
            bail!("folds.n_folds must be >= 2");
        }
        if !(0.0..1.0).contains(&self.folds.val_fraction) {
            bail!("folds.val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        TrainMode::parse(&self.mode).map_err(|e| anyhow!("{e}"))
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        EncoderSpec::by_id(&self.encoder)
            .ok_or_else(|| anyhow!("unknown encoder {:?} (known: toy, toy-attn, muq-310m, mert-95m)", self.encoder))
    }

    /// Cache root after the `CLEF_CACHE_ROOT` override.
    pub fn cache_root(&self) -> PathBuf {
        crate::cache::effective_cache_root(&self.cache_root)
    }

    /// Concrete training recipe for the configured mode plus overrides.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode = self.train_mode()?;
        let mut tc = TrainConfig::new(mode, self.train.seed.unwrap_or(mode_seed(mode)));
        if let Some(v) = self.train.seed {
            tc.seed = v;
        }
        if let Some(v) = self.train.lr_heads {
            tc.lr_heads = v;
        }
        if let Some(v) = self.train.lr_lora {
            tc.lr_lora = v;
        }
        if let Some(v) = self.train.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.train.max_epochs {
            tc.max_epochs = v;
        }
        if let Some(v) = self.train.patience {
            tc.patience = v;
        }
        if let Some(v) = self.train.grad_clip_norm {
            tc.grad_clip_norm = v;
        }
        if let Some(p) = &self.train.precision {
            tc.precision = match p.as_str() {
                "f32" => clef_core::trainer::Precision::F32,
                "mixed-bf16" => clef_core::trainer::Precision::MixedBf16,
                other => bail!("unknown precision {other:?}"),
            };
        }
        tc.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(tc)
    }

    /// Hash of the config with the mode normalized out, so all modes of one
    /// experiment share `runs/<hash>/`.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.mode = "-".into();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(12);
        for b in &digest[..6] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// `runs/<config-hash>/<mode>/` for the active mode.
    pub fn mode_dir(&self) -> PathBuf {
        self.output_root.join(self.config_hash()).join(&self.mode)
    }

    /// `runs/<config-hash>/` (cross-mode artifacts: folds, sweep, ablation).
    pub fn hash_dir(&self) -> PathBuf {
        self.output_root.join(self.config_hash())
    }
}

/// All training seeds default to one base so modes stay comparable.
fn mode_seed(_mode: TrainMode) -> u64 {
    7
}
