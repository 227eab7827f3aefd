//! Deterministic data-parallel reductions.
//!
//! Work is cut into fixed-size chunks, each chunk is reduced sequentially,
//! and partial results are combined in chunk order. The result is therefore
//! bit-identical for any rayon thread count.

use rayon::prelude::*;
use std::ops::Range;

pub const CHUNK: usize = 1 << 15;

/// Applies `f` to consecutive index ranges of length `chunk` covering `0..n`
/// and returns the results in range order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> T + Sync,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    (0..count)
        .into_par_iter()
        .map(|c| {
            let start = c * chunk;
            f(c, start..(start + chunk).min(n))
        })
        .collect()
}

/// Count, mean and centred second moment of a scalar statistic
/// (Welford updates, Chan merges).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMoments {
    pub count: usize,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance, 0 for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }
}

/// Moments of `f(i)` for `i` in `0..n`, reduced deterministically.
pub fn moments<F>(n: usize, f: F) -> RunningMoments
where
    F: Fn(usize) -> f64 + Sync,
{
    let parts = map_chunks(n, CHUNK, |_, range| {
        let mut acc = RunningMoments::default();
        for i in range {
            acc.push(f(i));
        }
        acc
    });
    let mut total = RunningMoments::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Moments over the prefix halves `0..n/2` and the full range, in one pass.
pub fn nested_moments<F>(n: usize, f: F) -> (RunningMoments, RunningMoments)
where
    F: Fn(usize) -> f64 + Sync,
{
    let half = n / 2;
    let parts = map_chunks(n, CHUNK, |_, range| {
        let mut lo = RunningMoments::default();
        let mut hi = RunningMoments::default();
        for i in range {
            let v = f(i);
            if i < half {
                lo.push(v);
            } else {
                hi.push(v);
            }
        }
        (lo, hi)
    });
    let mut first = RunningMoments::default();
    let mut rest = RunningMoments::default();
    for (lo, hi) in &parts {
        first.merge(lo);
        rest.merge(hi);
    }
    let mut full = first;
    full.merge(&rest);
    (first, full)
}

/// Counts of indices satisfying `pred`, reduced deterministically.
pub fn count<F>(n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync,
{
    map_chunks(n, CHUNK, |_, range| range.filter(|&i| pred(i)).count())
        .into_iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_is_thread_count_invariant() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| moments(200_001, f))
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a.mean().to_bits(), b.mean().to_bits());
        assert_eq!(a.variance().to_bits(), b.variance().to_bits());
    }

    #[test]
    fn nested_sums_split_at_half() {
        let (half, full) = nested_moments(11, |i| i as f64);
        assert_eq!(half.count, 5);
        assert_eq!(half.mean(), 2.0);
        assert_eq!(full.count, 11);
        assert_eq!(full.mean(), 5.0);
        assert!((full.variance() - 11.0).abs() < 1e-12);
    }
}
