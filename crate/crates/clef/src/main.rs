//! `clef`: per-sample quality metric pipeline for generated music.
//!
//! Subcommands cover the full experiment lifecycle: feature extraction,
//! per-fold training, cross-validated evaluation, progressive ablation,
//! degradation concordance, data-efficiency sweeps, and one-off scoring.
//! Completed outputs are skipped on rerun unless `--force` is given; the
//! process exits nonzero if any requested work failed.

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use clef::config::RunConfig;
use clef::pipeline;
use clef::synth::{write_dataset, SynthSpec};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clef", version, about = "quality metric pipeline for generated music")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Arguments shared by every config-driven subcommand.
#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the training mode (a1, a2, a3a, a3b, a3c, a4)
    #[arg(long)]
    mode: Option<String>,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output root directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// Redo work even if outputs already exist
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(mode) = &self.mode {
            cfg.mode = mode.clone();
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = Some(seed);
        }
        if let Some(out) = &self.output {
            cfg.output_root = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Populate the feature cache for every manifest clip
    Extract {
        #[command(flatten)]
        common: Common,
    },
    /// Train one fold or all folds
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only this fold
        #[arg(long)]
        fold: Option<u32>,
    },
    /// Evaluate all folds and write the report bundle
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Score audio files with a checkpoint
    Score {
        /// Checkpoint file (.clef)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Audio files to score
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Resample target in Hz
        #[arg(long, default_value_t = 24_000)]
        sample_rate: u32,
        /// Clip length in seconds
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Compare evaluation reports across modes
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mode list, in comparison order
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Degradation concordance on the configured fold
    Degrade {
        #[command(flatten)]
        common: Common,
    },
    /// Data-efficiency sweep on the configured fold
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize every completed artifact for the config
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic annotated dataset
    Synth {
        /// Output directory for audio/ and manifest.csv
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long, default_value_t = 10)]
        systems: usize,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 23)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Extract { common } => {
            let cfg = common.load()?;
            let summary = pipeline::cmd_extract(&cfg, common.force)?;
            println!(
                "extract: {} cached, {} extracted, {} failed",
                summary.hits,
                summary.extracted,
                summary.failures.len()
            );
            for (clip, reason) in &summary.failures {
                eprintln!("  {clip}: {reason}");
            }
            Ok(summary.failures.is_empty())
        }
        Command::Train { common, fold } => {
            let cfg = common.load()?;
            let written = pipeline::cmd_train(&cfg, fold, common.force)?;
            for path in &written {
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Evaluate { common } => {
            let cfg = common.load()?;
            let (bundle, _) = pipeline::cmd_evaluate(&cfg, common.force)?;
            println!(
                "mode {}: utterance SRCC mi {:.4}+-{:.4} ta {:.4}+-{:.4}, system SRCC {:.4}",
                cfg.mode,
                bundle.utterance_mi_srcc.mean,
                bundle.utterance_mi_srcc.sd,
                bundle.utterance_ta_srcc.mean,
                bundle.utterance_ta_srcc.sd,
                bundle.system_pooled.srcc.value,
            );
            println!("{}", cfg.mode_dir().join("report.json").display());
            Ok(true)
        }
        Command::Score {
            checkpoint,
            files,
            sample_rate,
            seconds,
        } => {
            let (lines, failures) =
                pipeline::cmd_score(&checkpoint, &files, sample_rate, seconds)?;
            for l in &lines {
                println!(
                    "{}\tmi={:.3}\tta={:.3}\t{:.0}ms",
                    l.path.display(),
                    l.mi,
                    l.ta,
                    l.millis
                );
            }
            for (path, reason) in &failures {
                eprintln!("{}: {reason}", path.display());
            }
            Ok(failures.is_empty())
        }
        Command::Ablate { common, modes } => {
            let cfg = common.load()?;
            let modes = if modes.is_empty() {
                pipeline::ABLATION_LADDER
                    .iter()
                    .map(|m| m.to_string())
                    .collect()
            } else {
                modes
            };
            // Default ladder: whatever subset has been evaluated.
            let modes: Vec<String> = modes
                .into_iter()
                .filter(|m| {
                    cfg.output_root
                        .join(cfg.config_hash())
                        .join(m)
                        .join("report.json")
                        .is_file()
                })
                .collect();
            let bundle = pipeline::cmd_ablate(&cfg, &modes)?;
            for step in &bundle.steps {
                println!(
                    "{}: dSRCC {:+.4} q {:.4} threshold {}",
                    step.label, step.delta_srcc, step.cohens_q, step.meets_threshold
                );
            }
            println!("{}", cfg.hash_dir().join("ablation.json").display());
            Ok(true)
        }
        Command::Degrade { common } => {
            let cfg = common.load()?;
            let bundle = pipeline::cmd_degrade(&cfg, common.force)?;
            println!(
                "concordance over {} clips: overall {:.4}",
                bundle.selected_clips, bundle.report.overall_mean
            );
            println!("{}", cfg.mode_dir().join("concordance.json").display());
            Ok(true)
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            let bundle = pipeline::cmd_sweep(&cfg, common.force)?;
            let failed = bundle.table.cells.iter().filter(|c| !c.ok).count();
            println!(
                "sweep: {} cells, {} failed, crossover {}",
                bundle.table.cells.len(),
                failed,
                bundle
                    .table
                    .crossover
                    .map_or("none".to_string(), |n| n.to_string())
            );
            println!("{}", cfg.hash_dir().join("sweep.json").display());
            Ok(failed == 0)
        }
        Command::Report { common } => {
            let cfg = common.load()?;
            let index = pipeline::cmd_report(&cfg)?;
            println!("config {}", index.config_hash);
            println!("  evaluated modes: {}", index.modes.join(", "));
            println!("  ablation: {}", index.has_ablation);
            println!("  sweep: {}", index.has_sweep);
            println!(
                "  concordance: {}",
                if index.concordance_modes.is_empty() {
                    "none".to_string()
                } else {
                    index.concordance_modes.join(", ")
                }
            );
            Ok(true)
        }
        Command::Synth {
            output,
            clips,
            systems,
            seconds,
            seed,
        } => {
            let spec = SynthSpec {
                n_clips: clips,
                n_systems: systems,
                seconds,
                seed,
                ..SynthSpec::default()
            };
            let manifest = write_dataset(&output, &spec)?;
            println!("{}", manifest.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
