//! Small statistical helpers: normal tails, quantiles, medians, and a
//! Kolmogorov-Smirnov uniformity check used by the calibration tests.

use statrs::distribution::{ContinuousCDF, Normal};

/// Upper tail of the standard normal, `1 - Phi(z)`, via erfc in double
/// precision (no continuity correction).
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(p)
}

/// Lower median: for even counts, the smaller of the two middle values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Two-sided KS statistic of `samples` against the uniform distribution
/// on `[0, 1]`.
pub fn ks_uniform_statistic(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let hi = (i as f64 + 1.0) / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Critical KS value at significance `alpha` using the asymptotic
/// Kolmogorov quantile with the Stephens small-sample correction.
pub fn ks_uniform_critical(n: usize, alpha: f64) -> f64 {
    let k_alpha = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let n = n as f64;
    k_alpha / (n.sqrt() + 0.12 + 0.11 / n.sqrt())
}
