//! Error types shared across the core crate.

use alloc::string::String;
use thiserror::Error;

/// Errors produced by core operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    /// Input violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shapes of two operands do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A correlation is undefined for the given data (constant or all-tied input).
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// Fold stratification cannot be satisfied.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Requested subsample exceeds the available pool.
    #[error("subsample size error: {0}")]
    SubsampleSize(String),

    /// Loss/mode configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged (non-finite loss).
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr_heads={lr_heads}, lr_lora={lr_lora})")]
    NonFiniteLoss {
        epoch: u32,
        batch: u32,
        lr_heads: f64,
        lr_lora: f64,
    },

    /// LoRA target projection not present on the encoder.
    #[error("adaptation error: {0}")]
    Adaptation(String),

    /// Bootstrap could not produce enough defined replicates.
    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    /// Degenerate statistic (e.g. |r| = 1 in the Steiger test).
    #[error("singularity: {0}")]
    Singularity(String),

    /// Evaluation input incomplete (missing predictions or targets).
    #[error("completeness error: {0}")]
    Incomplete(String),
}
