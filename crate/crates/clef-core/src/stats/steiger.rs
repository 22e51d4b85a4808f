//! Williams–Steiger test for comparing two dependent correlations that share
//! one variable, plus Cohen's q and Bonferroni adjustment.

use crate::error::CoreError;
use crate::math::{fisher_z, normal_quantile, student_t_two_sided_p};
use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Outcome of a Steiger comparison of r12 vs r13 (shared variable 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteigerResult {
    /// Signed z-score equivalent of the Williams t statistic.
    pub z: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Cohen's q effect size |atanh(r12) - atanh(r13)|.
    pub q: f64,
    /// Whether p < the supplied adjusted alpha.
    pub significant: bool,
}

/// Cohen's q for a difference of two correlations.
pub fn cohens_q(r1: f64, r2: f64) -> f64 {
    libm::fabs(fisher_z(r1) - fisher_z(r2))
}

/// Williams–Steiger test for H0: rho12 = rho13 given r23 and sample size n.
///
/// `r12` and `r13` are the two metric-vs-reference correlations, `r23` the
/// correlation between the two metrics. The Williams t approximation with
/// n - 3 degrees of freedom is used; the returned `z` maps the two-sided p
/// back to a signed standard normal score.
pub fn steiger_test(
    r12: f64,
    r13: f64,
    r23: f64,
    n: usize,
    alpha_adj: f64,
) -> Result<SteigerResult, CoreError> {
    for r in [r12, r13, r23] {
        if !(r.abs() < 1.0) {
            return Err(CoreError::Singularity(format!(
                "correlation {r} has |r| >= 1"
            )));
        }
    }
    if n < 4 {
        return Err(CoreError::InvalidInput(format!(
            "Steiger test needs n >= 4, got {n}"
        )));
    }

    let q = cohens_q(r12, r13);
    if r12 == r13 {
        return Ok(SteigerResult {
            z: 0.0,
            p: 1.0,
            q,
            significant: false,
        });
    }

    let nf = n as f64;
    let det = 1.0 - r12 * r12 - r13 * r13 - r23 * r23 + 2.0 * r12 * r13 * r23;
    let r_bar = 0.5 * (r12 + r13);
    let denom = 2.0 * (nf - 1.0) / (nf - 3.0) * det
        + r_bar * r_bar * libm::pow(1.0 - r23, 3.0);
    if denom <= 0.0 {
        return Err(CoreError::Singularity(
            "degenerate correlation triple in Williams denominator".into(),
        ));
    }
    let t = (r12 - r13) * libm::sqrt((nf - 1.0) * (1.0 + r23) / denom);
    let p = student_t_two_sided_p(t, nf - 3.0).clamp(f64::MIN_POSITIVE, 1.0);
    // Map the two-sided p back onto a signed normal score.
    let z = if p >= 1.0 {
        0.0
    } else {
        normal_quantile(1.0 - p / 2.0) * t.signum()
    };
    Ok(SteigerResult {
        z,
        p,
        q,
        significant: p < alpha_adj,
    })
}

/// Bonferroni adjustment: test i is significant iff p_i < alpha / m.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha in (0,1)");
    let m = p_values.len().max(1) as f64;
    p_values.iter().map(|&p| p < alpha / m).collect()
}
