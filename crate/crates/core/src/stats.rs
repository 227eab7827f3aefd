//! Point estimates with confidence intervals.

use crate::parallel::RunningMoments;
use serde::{Deserialize, Serialize};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Sample size behind the estimate; 0 for exact values.
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, ci_lo: value, ci_hi: value, n: 0 }
    }

    /// Sample mean with a normal-approximation interval.
    pub fn from_moments(sums: &RunningMoments) -> Self {
        let mean = sums.mean();
        let se = (sums.variance() / sums.count.max(1) as f64).sqrt();
        Self {
            value: mean,
            ci_lo: mean - Z95 * se,
            ci_hi: mean + Z95 * se,
            n: sums.count,
        }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_lo <= x && x <= self.ci_hi
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_lo <= other.ci_hi && other.ci_lo <= self.ci_hi
    }

    pub fn scale(&self, factor: f64) -> Self {
        let (lo, hi) = if factor >= 0.0 {
            (self.ci_lo * factor, self.ci_hi * factor)
        } else {
            (self.ci_hi * factor, self.ci_lo * factor)
        };
        Self { value: self.value * factor, ci_lo: lo, ci_hi: hi, n: self.n }
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: usize, trials: usize) -> Estimate {
    if trials == 0 {
        return Estimate { value: f64::NAN, ci_lo: 0.0, ci_hi: 1.0, n: 0 };
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Estimate {
        value: p,
        ci_lo: if successes == 0 { 0.0 } else { (centre - half).max(0.0) },
        ci_hi: (centre + half).min(1.0),
        n: trials,
    }
}

/// Relative change `|b - a| / |b|`, with 0/0 treated as no change.
pub fn relative_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (b - a).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}
