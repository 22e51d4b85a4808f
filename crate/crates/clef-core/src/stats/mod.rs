//! Correlation and inference statistics.
//!
//! Pearson, Spearman (mid-ranks), Kendall tau-b, Fisher z effect sizes,
//! BCa bootstrap intervals, and the Williams–Steiger test for dependent
//! correlations. Undefined correlations (constant input) are reported as
//! errors, never as NaN.

mod bootstrap;
mod steiger;

pub use bootstrap::{bca_from_replicates, bca_interval, percentile_interval};
pub use steiger::{bonferroni, cohens_q, steiger_test, SteigerResult};

use crate::error::CoreError;
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Which correlation a [`CorrEstimate`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrKind {
    Pcc,
    Srcc,
    Tau,
}

/// A correlation point estimate with an optional BCa interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrEstimate {
    pub kind: CorrKind,
    pub value: f64,
    pub n: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub bootstrap_b: Option<u32>,
    pub seed: Option<u64>,
}

fn check_len(x: &[f64], y: &[f64]) -> Result<(), CoreError> {
    if x.len() != y.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "paired vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(CoreError::InvalidInput(format!(
            "need at least 3 pairs, got {}",
            x.len()
        )));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, CoreError> {
    check_len(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(CoreError::UndefinedCorrelation(
            "Pearson correlation of a constant vector".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Mid-ranks (average ranks for ties), 1-based.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut ranks = alloc::vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // positions i..=j share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, CoreError> {
    check_len(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(CoreError::UndefinedCorrelation(
            "Spearman correlation of an all-tied vector".into(),
        ));
    }
    pearson(&midranks(x), &midranks(y))
}

/// Kendall tau-b with tie correction.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64, CoreError> {
    check_len(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(CoreError::UndefinedCorrelation(
            "Kendall tau of an all-tied vector".into(),
        ));
    }
    let n = x.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut ties_x = 0u64; // tied on x only
    let mut ties_y = 0u64; // tied on y only
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                // tied on both: contributes to neither correction term
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let c = concordant as f64;
    let d = discordant as f64;
    let denom = libm::sqrt((c + d + ties_x as f64) * (c + d + ties_y as f64));
    if denom == 0.0 {
        return Err(CoreError::UndefinedCorrelation(
            "Kendall tau denominator is zero".into(),
        ));
    }
    Ok((c - d) / denom)
}
