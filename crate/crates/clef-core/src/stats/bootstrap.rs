//! Bias-corrected and accelerated (BCa) bootstrap confidence intervals for
//! statistics of paired samples.
//!
//! Replicate RNG streams are derived from (seed, replicate index) so the
//! computation is deterministic and could be parallelized without changing
//! results.

use crate::error::CoreError;
use crate::math::{normal_cdf, normal_quantile};
use crate::derive_seed;
use alloc::format;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// BCa interval for `statistic` over a paired sample.
///
/// Resamples pairs with replacement `b` times. A replicate on which the
/// statistic is undefined (e.g. a constant resample) is redrawn from a fresh
/// stream, with a global cap of `10 * b` draws.
pub fn bca_interval<F>(
    data: &[(f64, f64)],
    statistic: F,
    b: u32,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), CoreError>
where
    F: Fn(&[(f64, f64)]) -> Result<f64, CoreError>,
{
    let n = data.len();
    if n < 8 {
        return Err(CoreError::InvalidInput(format!(
            "BCa needs at least 8 pairs, got {n}"
        )));
    }
    if b == 0 {
        return Err(CoreError::InvalidInput("B must be positive".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(CoreError::InvalidInput("level must be in (0,1)".into()));
    }

    let theta_hat = statistic(data)?;

    // Bootstrap replicates with redraw on undefined statistics.
    let max_attempts = 10u64 * u64::from(b);
    let mut attempts = 0u64;
    let mut replicates = Vec::with_capacity(b as usize);
    let mut resample = alloc::vec![(0.0, 0.0); n];
    while replicates.len() < b as usize {
        if attempts >= max_attempts {
            return Err(CoreError::Bootstrap(format!(
                "statistic undefined on too many replicates ({attempts} draws for B={b})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempts));
        attempts += 1;
        for slot in resample.iter_mut() {
            *slot = data[rng.random_range(0..n)];
        }
        if let Ok(v) = statistic(&resample) {
            replicates.push(v);
        }
    }

    // Degenerate case: every replicate equals the same value.
    if replicates.iter().all(|&v| v == replicates[0]) {
        return Ok((replicates[0], replicates[0]));
    }

    // Bias correction from the fraction of replicates below the estimate.
    let below = replicates.iter().filter(|&&v| v < theta_hat).count() as f64;
    let frac = (below / f64::from(b)).clamp(
        1.0 / (f64::from(b) + 1.0),
        f64::from(b) / (f64::from(b) + 1.0),
    );
    let z0 = normal_quantile(frac);

    // Acceleration from jackknife skewness.
    let mut jack = Vec::with_capacity(n);
    let mut loo = Vec::with_capacity(n - 1);
    for i in 0..n {
        loo.clear();
        loo.extend(data.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &p)| p));
        let v = statistic(&loo).map_err(|e| {
            CoreError::Bootstrap(format!("statistic undefined on jackknife subsample {i}: {e}"))
        })?;
        jack.push(v);
    }
    let jack_mean = jack.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for &v in &jack {
        let d = jack_mean - v;
        num += d * d * d;
        den += d * d;
    }
    let accel = if den == 0.0 {
        0.0
    } else {
        num / (6.0 * libm::pow(den, 1.5))
    };

    replicates.sort_by(|a, b| a.partial_cmp(b).expect("finite replicates"));
    Ok(bca_from_replicates(&replicates, z0, accel, level))
}

/// Adjusted-percentile step of BCa, exposed separately so the reduction to a
/// plain percentile interval (z0 = 0, a = 0) can be checked directly.
///
/// `sorted_replicates` must be ascending.
pub fn bca_from_replicates(sorted_replicates: &[f64], z0: f64, accel: f64, level: f64) -> (f64, f64) {
    let alpha = (1.0 - level) / 2.0;
    let adjust = |a: f64| -> f64 {
        let za = normal_quantile(a);
        let t = z0 + (z0 + za) / (1.0 - accel * (z0 + za));
        normal_cdf(t)
    };
    let lo = quantile_sorted(sorted_replicates, adjust(alpha));
    let hi = quantile_sorted(sorted_replicates, adjust(1.0 - alpha));
    (lo, hi)
}

/// Plain percentile interval over ascending replicates.
pub fn percentile_interval(sorted_replicates: &[f64], level: f64) -> (f64, f64) {
    let alpha = (1.0 - level) / 2.0;
    (
        quantile_sorted(sorted_replicates, alpha),
        quantile_sorted(sorted_replicates, 1.0 - alpha),
    )
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}
