//! Tail estimators over stationary pools.
//!
//! Every estimator here is a pure function of an immutable pool. Exceedance
//! counts are integers, so ladders do not depend on the worker count.

use crate::blocks::BlockPartition;
use crate::error::{Error, Result};
use crate::geometry::AlphaNorm;
use crate::parallel::{self, CHUNK};
use crate::simulate::SamplePool;
use crate::stats::{self, relative_change, Estimate, Z95};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const DEFAULT_QUANTILES: [f64; 5] = [0.99, 0.995, 0.999, 0.9995, 0.9999];
/// Exceedances required at the top rung of a tail-constant ladder.
pub const MIN_TOP_EXCEEDANCES: usize = 50;
/// Exceedances required for a spectral rung to be kept.
pub const MIN_SPECTRAL_EXCEEDANCES: usize = 100;
pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_EPS: f64 = 0.05;
/// Relative change between half and full sample that flags a moment as unstable.
pub const STABILITY_TOL: f64 = 0.05;
/// A Goldie estimate whose CI half-width exceeds this fraction of the
/// estimate is flagged unstable.
const GOLDIE_MAX_REL_HALF_WIDTH: f64 = 0.25;

/// Thresholds at which a ladder is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Ladder {
    /// Empirical quantiles of the statistic being thresholded.
    Quantiles { levels: Vec<f64> },
    Thresholds { values: Vec<f64> },
}

impl Default for Ladder {
    fn default() -> Self {
        Ladder::Quantiles { levels: DEFAULT_QUANTILES.to_vec() }
    }
}

impl Ladder {
    /// Thresholds for the statistic whose sorted values are `sorted`.
    pub fn resolve(&self, sorted: &[f64]) -> Result<Vec<f64>> {
        let out = match self {
            Ladder::Quantiles { levels } => {
                if sorted.is_empty() {
                    return Err(Error::Insufficient("empty pool".into()));
                }
                if levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
                    return Err(Error::config(format!("quantile levels must lie in (0, 1): {levels:?}")));
                }
                let n = sorted.len();
                levels
                    .iter()
                    .map(|&q| {
                        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
                        sorted[idx]
                    })
                    .collect::<Vec<_>>()
            }
            Ladder::Thresholds { values } => {
                if values.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
                    return Err(Error::config(format!("thresholds must be finite and nonnegative: {values:?}")));
                }
                values.clone()
            }
        };
        if out.is_empty() || out.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("ladder must be nonempty and increasing"));
        }
        Ok(out)
    }
}

/// One threshold of a ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub t: f64,
    pub exceedances: usize,
    /// Normalised exceedance probability with its Wilson interval.
    pub estimate: Estimate,
}

fn sorted_copy(values: impl IntoParallelIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_par_iter().collect();
    v.par_sort_unstable_by(f64::total_cmp);
    v
}

/// Number of entries of `sorted` strictly above `t`.
fn count_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v <= t)
}

fn rung(t: f64, exceedances: usize, n: usize, scale: f64) -> Rung {
    let p = stats::wilson(exceedances, n);
    Rung { t, exceedances, estimate: if scale == 0.0 { Estimate::exact(0.0) } else { p.scale(scale) } }
}

/// True when the intervals of the last three rungs share a point.
pub fn top_three_agree(rungs: &[Rung]) -> bool {
    if rungs.len() < 3 {
        return false;
    }
    let top = &rungs[rungs.len() - 3..];
    let lo = top.iter().map(|r| r.estimate.ci_lo).fold(f64::NEG_INFINITY, f64::max);
    let hi = top.iter().map(|r| r.estimate.ci_hi).fold(f64::INFINITY, f64::min);
    lo <= hi
}

/// Writes a ladder as CSV with columns `t, estimate, ci_lo, ci_hi`.
pub fn write_ladder_csv<W: Write>(rungs: &[Rung], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "estimate", "ci_lo", "ci_hi"])?;
    for r in rungs {
        w.write_record([r.t, r.estimate.value, r.estimate.ci_lo, r.estimate.ci_hi].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillEstimate {
    pub alpha: Estimate,
    pub k: usize,
    /// The `(k+1)`-th largest value, the Hill threshold.
    pub threshold: f64,
}

/// Hill estimator on the `k` largest of `values` (all positive).
pub fn hill_estimate(values: &[f64], k: usize) -> Result<HillEstimate> {
    if k < 5 {
        return Err(Error::Insufficient(format!("Hill needs k >= 5, got {k}")));
    }
    if k >= values.len() {
        return Err(Error::Insufficient(format!("Hill needs k < n, got k = {k}, n = {}", values.len())));
    }
    if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("Hill needs positive finite values".into()));
    }
    let mut v = values.to_vec();
    // Only the top k+1 order statistics matter.
    let split = v.len() - k - 1;
    v.select_nth_unstable_by(split, f64::total_cmp);
    let threshold = v[split];
    let mut top = v[split + 1..].to_vec();
    top.sort_unstable_by(f64::total_cmp);
    let lt = threshold.ln();
    let h = top.iter().map(|x| x.ln() - lt).sum::<f64>() / k as f64;
    if !(h > 0.0) {
        return Err(Error::Domain("zero log-spacings above the Hill threshold: the tail index is infinite".into()));
    }
    let alpha = 1.0 / h;
    let half = Z95 * alpha / (k as f64).sqrt();
    Ok(HillEstimate { alpha: Estimate { value: alpha, ci_lo: alpha - half, ci_hi: alpha + half, n: k }, k, threshold })
}

/// Ladders of `t^{α_j} P̂(±X_j > t)` and `t^{α_j} P̂(|X_j| > t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTail {
    pub coord: usize,
    pub alpha: f64,
    pub plus: Vec<Rung>,
    pub minus: Vec<Rung>,
    pub total: Vec<Rung>,
    pub converged_plus: bool,
    pub converged_minus: bool,
    pub converged: bool,
}

impl MarginalTail {
    pub fn c_plus(&self) -> Estimate {
        self.plus.last().expect("nonempty ladder").estimate
    }

    pub fn c_minus(&self) -> Estimate {
        self.minus.last().expect("nonempty ladder").estimate
    }

    pub fn c_total(&self) -> Estimate {
        self.total.last().expect("nonempty ladder").estimate
    }
}

/// `sorted` is the thresholded statistic; a constant statistic has an
/// exactly empty tail and is not an error.
fn check_top(rungs: &[Rung], sorted: &[f64], what: &str) -> Result<()> {
    let top = rungs.last().expect("nonempty ladder");
    let constant = sorted.first() == sorted.last();
    if !constant && top.exceedances < MIN_TOP_EXCEEDANCES {
        return Err(Error::Insufficient(format!(
            "{what}: only {} exceedances above the top threshold {} (need {MIN_TOP_EXCEEDANCES}); widen the ladder",
            top.exceedances, top.t
        )));
    }
    Ok(())
}

pub fn empirical_tail_constant(pool: &SamplePool, j: usize, alpha: f64, ladder: &Ladder) -> Result<MarginalTail> {
    if j >= pool.dim() {
        return Err(Error::Coordinate { index: j, dim: pool.dim() });
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let x = pool.x(j);
    let n = x.len();
    let abs = sorted_copy(x.par_iter().map(|v| v.abs()));
    let signed = sorted_copy(x.par_iter().copied());
    let thresholds = ladder.resolve(&abs)?;
    let mut plus = Vec::with_capacity(thresholds.len());
    let mut minus = Vec::with_capacity(thresholds.len());
    let mut total = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let scale = t.powf(alpha);
        let up = count_above(&signed, t);
        let down = signed.partition_point(|&v| v < -t);
        plus.push(rung(t, up, n, scale));
        minus.push(rung(t, down, n, scale));
        total.push(rung(t, count_above(&abs, t), n, scale));
    }
    check_top(&total, &abs, &format!("coordinate {j}"))?;
    Ok(MarginalTail {
        coord: j,
        alpha,
        converged_plus: top_three_agree(&plus),
        converged_minus: top_three_agree(&minus),
        converged: top_three_agree(&total),
        plus,
        minus,
        total,
    })
}

/// Implicit-renewal estimate of `c_+ + c_-` and of the signed constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldieConstant {
    pub total: Estimate,
    pub plus: Estimate,
    pub minus: Estimate,
    /// The summand is heavy tailed enough that the mean moved by more than
    /// 5% under doubling, or the CI is wider than a quarter of the value.
    pub unstable: bool,
}

/// `(1/(α m)) E(|A X + B|^α - |A X|^α)` with `X` taken from `x_pre`, which
/// is independent of `A` by construction of the pool. Using `x_post`
/// instead would break that independence and bias the estimate.
pub fn goldie_constant(pool: &SamplePool, j: usize, alpha: f64, m: f64) -> Result<GoldieConstant> {
    if j >= pool.dim() {
        return Err(Error::Coordinate { index: j, dim: pool.dim() });
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Precondition(format!(
            "the Goldie mean E|A|^α log|A| must be positive and finite, got {m}"
        )));
    }
    if pool.is_empty() {
        return Err(Error::Insufficient("empty pool".into()));
    }
    let (x, a, b) = (pool.x_pre(j), pool.a(j), pool.b(j));
    let norm = 1.0 / (alpha * m);
    let pos = |v: f64| v.max(0.0).powf(alpha);
    let neg = |v: f64| (-v).max(0.0).powf(alpha);
    let n = x.len();
    let term = |k: usize, f: &dyn Fn(f64) -> f64| {
        let ax = a[k] * x[k];
        f(ax + b[k]) - f(ax)
    };
    let summarize = |f: &(dyn Fn(f64) -> f64 + Sync)| {
        let (half, full) = parallel::nested_moments(n, |k| term(k, f));
        (Estimate::from_moments(&full).scale(norm), relative_change(half.mean(), full.mean()))
    };
    let (total, drift) = summarize(&|v: f64| v.abs().powf(alpha));
    let (plus, _) = summarize(&pos);
    let (minus, _) = summarize(&neg);
    let unstable = drift >= STABILITY_TOL || total.half_width() > GOLDIE_MAX_REL_HALF_WIDTH * total.value.abs();
    Ok(GoldieConstant { total, plus, minus, unstable })
}

/// `|X|_α` for every record of the pool.
pub fn pool_norms(pool: &SamplePool, norm: &AlphaNorm, coords: &[usize]) -> Vec<f64> {
    let d = pool.dim();
    let parts = parallel::map_chunks(pool.len(), CHUNK, |_, range| {
        let mut x = vec![0.0; d];
        range
            .map(|k| {
                pool.x_vec(k, &mut x);
                norm.norm_on(&x, coords)
            })
            .collect::<Vec<_>>()
    });
    parts.concat()
}

/// Ladders of `t P̂(|X^{(l)}|_α > t)` per block and for the full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTails {
    pub blocks: Vec<Vec<Rung>>,
    pub full: Vec<Rung>,
    /// Top-rung values.
    pub c_block: Vec<Estimate>,
    pub c_inf: Estimate,
    pub block_sum: f64,
    /// Root-sum-square of the half-widths of `c_inf` and every `c_block`.
    pub combined_half_width: f64,
    /// `|c_inf - Σ c_block|` within the combined half-width.
    pub consistent: bool,
}

/// All blocks share the thresholds of the full-vector ladder, so that
/// `c_inf` and `Σ c_block` are compared at the same `t`.
pub fn block_tail_constant(
    pool: &SamplePool,
    partition: &BlockPartition,
    norm: &AlphaNorm,
    ladder: &Ladder,
) -> Result<BlockTails> {
    if partition.dim() != pool.dim() || norm.dim() != pool.dim() {
        return Err(Error::config("partition, norm and pool dimensions differ"));
    }
    let n = pool.len();
    let all: Vec<usize> = (0..pool.dim()).collect();
    let full_sorted = sorted_copy(pool_norms(pool, norm, &all));
    let thresholds = ladder.resolve(&full_sorted)?;
    let ladder_on = |sorted: &[f64]| thresholds.iter().map(|&t| rung(t, count_above(sorted, t), n, t)).collect::<Vec<_>>();
    let full = ladder_on(&full_sorted);
    check_top(&full, &full_sorted, "full vector")?;
    let blocks: Vec<Vec<Rung>> = partition
        .classes
        .par_iter()
        .map(|class| ladder_on(&sorted_copy(pool_norms(pool, norm, class))))
        .collect();
    let c_block: Vec<Estimate> = blocks.iter().map(|b| b.last().unwrap().estimate).collect();
    let c_inf = full.last().unwrap().estimate;
    let block_sum: f64 = c_block.iter().map(|e| e.value).sum();
    let combined_half_width =
        (c_inf.half_width().powi(2) + c_block.iter().map(|e| e.half_width().powi(2)).sum::<f64>()).sqrt();
    let consistent = (c_inf.value - block_sum).abs() <= combined_half_width;
    Ok(BlockTails { blocks, full, c_block, c_inf, block_sum, combined_half_width, consistent })
}

/// Histogram of polar angles `ω = δ_{1/|x|_α} x`, whose coordinates lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Histogram {
    /// Joint cells, coordinate 0 varying slowest; used for `d ≤ 3`.
    Product { bins: usize, mass: Vec<f64> },
    /// One marginal histogram per coordinate; used for `d > 3`.
    Marginal { bins: usize, mass: Vec<Vec<f64>> },
}

pub const MAX_PRODUCT_DIM: usize = 3;

fn bin_of(w: f64, bins: usize) -> usize {
    (((w + 1.0) * 0.5 * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

impl Histogram {
    pub fn total_mass(&self) -> f64 {
        match self {
            Histogram::Product { mass, .. } => mass.iter().sum(),
            Histogram::Marginal { mass, .. } => mass.first().map_or(0.0, |m| m.iter().sum()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRung {
    pub t: f64,
    pub exceedances: usize,
    pub histogram: Histogram,
    /// Fraction of exceedances whose angle lies within `eps` of block `l`'s
    /// embedded sphere, i.e. with off-block `|ω|_α < eps`.
    pub block_mass: Vec<Estimate>,
    pub block_mass_total: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub bins: usize,
    pub eps: f64,
    pub rungs: Vec<SpectralRung>,
    /// Thresholds dropped for having fewer than the minimum exceedances.
    pub dropped: Vec<f64>,
}

impl SpectralEstimate {
    pub fn block_mass_nondecreasing(&self) -> bool {
        self.rungs.windows(2).all(|w| w[1].block_mass_total.value >= w[0].block_mass_total.value)
    }
}

pub fn spectral_measure(
    pool: &SamplePool,
    partition: &BlockPartition,
    norm: &AlphaNorm,
    ladder: &Ladder,
    bins: usize,
    eps: f64,
) -> Result<SpectralEstimate> {
    let d = pool.dim();
    if partition.dim() != d || norm.dim() != d {
        return Err(Error::config("partition, norm and pool dimensions differ"));
    }
    if bins == 0 || !(eps > 0.0) {
        return Err(Error::config("bins and eps must be positive"));
    }
    let all: Vec<usize> = (0..d).collect();
    let norms = pool_norms(pool, norm, &all);
    let thresholds = ladder.resolve(&sorted_copy(norms.par_iter().copied()))?;
    let off_block: Vec<Vec<usize>> =
        partition.classes.iter().map(|c| (0..d).filter(|j| !c.contains(j)).collect()).collect();

    let evaluated: Vec<std::result::Result<SpectralRung, f64>> = thresholds
        .par_iter()
        .map(|&t| {
            let idx: Vec<usize> = (0..pool.len()).filter(|&k| norms[k] > t).collect();
            if idx.len() < MIN_SPECTRAL_EXCEEDANCES {
                return Err(t);
            }
            let mut counts_joint = vec![0usize; if d <= MAX_PRODUCT_DIM { bins.pow(d as u32) } else { 0 }];
            let mut counts_marg = vec![vec![0usize; bins]; if d > MAX_PRODUCT_DIM { d } else { 0 }];
            let mut near = vec![0usize; partition.len()];
            let mut x = vec![0.0; d];
            for &k in &idx {
                pool.x_vec(k, &mut x);
                let (_, omega) = norm.polar(&x).expect("exceedances are nonzero");
                if d <= MAX_PRODUCT_DIM {
                    let cell = omega.iter().fold(0, |acc, &w| acc * bins + bin_of(w, bins));
                    counts_joint[cell] += 1;
                } else {
                    for (j, &w) in omega.iter().enumerate() {
                        counts_marg[j][bin_of(w, bins)] += 1;
                    }
                }
                for (l, off) in off_block.iter().enumerate() {
                    if norm.norm_on(&omega, off) < eps {
                        near[l] += 1;
                    }
                }
            }
            let m = idx.len();
            let frac = |c: usize| c as f64 / m as f64;
            let histogram = if d <= MAX_PRODUCT_DIM {
                Histogram::Product { bins, mass: counts_joint.into_iter().map(frac).collect() }
            } else {
                Histogram::Marginal { bins, mass: counts_marg.into_iter().map(|c| c.into_iter().map(frac).collect()).collect() }
            };
            Ok(SpectralRung {
                t,
                exceedances: m,
                histogram,
                block_mass: near.iter().map(|&c| stats::wilson(c, m)).collect(),
                block_mass_total: stats::wilson(near.iter().sum(), m),
            })
        })
        .collect();

    let mut rungs = Vec::new();
    let mut dropped = Vec::new();
    for r in evaluated {
        match r {
            Ok(r) => rungs.push(r),
            Err(t) => {
                log::warn!("spectral rung at t = {t} dropped: fewer than {MIN_SPECTRAL_EXCEEDANCES} exceedances");
                dropped.push(t);
            }
        }
    }
    if rungs.is_empty() {
        return Err(Error::Insufficient("every spectral rung has too few exceedances".into()));
    }
    Ok(SpectralEstimate { bins, eps, rungs, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub s: f64,
    pub estimate: Estimate,
    /// The mean over the first half of the pool is within 5% of the full
    /// mean. Expected to hold for `s < α_j` and to fail beyond it.
    pub stable: bool,
    pub relative_change: f64,
}

/// `E|X_j|^s` with a doubling-stability diagnostic.
pub fn moment_estimate(pool: &SamplePool, j: usize, s: f64) -> Result<MomentCheck> {
    if j >= pool.dim() {
        return Err(Error::Coordinate { index: j, dim: pool.dim() });
    }
    if !(s > 0.0) {
        return Err(Error::Domain(format!("moment order must be positive, got {s}")));
    }
    if pool.len() < 2 {
        return Err(Error::Insufficient("moment estimate needs at least two records".into()));
    }
    let x = pool.x(j);
    let (half, full) = parallel::nested_moments(x.len(), |k| x[k].abs().powf(s));
    let change = relative_change(half.mean(), full.mean());
    let estimate = Estimate::from_moments(&full);
    Ok(MomentCheck { s, estimate, stable: estimate.value.is_finite() && change < STABILITY_TOL, relative_change: change })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSequence;
    use rand::Rng;

    fn pareto(n: usize, alpha: f64, seed: u64, signed: bool) -> Vec<f64> {
        let mut rng = SeedSequence::new(seed).stream(0);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let v = (1.0 - u).powf(-1.0 / alpha);
                if signed && rng.random::<bool>() {
                    -v
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn hill_on_exact_pareto() {
        let v = pareto(1_000_000, 2.0, 1, false);
        let h = hill_estimate(&v, 10_000).unwrap();
        assert!((h.alpha.value - 2.0).abs() < 0.06, "{h:?}");
        assert!(h.alpha.contains(2.0) || (h.alpha.value - 2.0).abs() < 1.5 * h.alpha.half_width());
        let scaled: Vec<f64> = v.iter().map(|x| 7.0 * x).collect();
        let h7 = hill_estimate(&scaled, 10_000).unwrap();
        assert!((h7.alpha.value - h.alpha.value).abs() < 1e-9);
    }

    #[test]
    fn hill_errors() {
        assert!(matches!(hill_estimate(&[3.0; 100], 10), Err(Error::Domain(_))));
        assert!(matches!(hill_estimate(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], 4), Err(Error::Insufficient(_))));
        assert!(hill_estimate(&[1.0; 5], 5).is_err());
        assert!(hill_estimate(&[1.0, -1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 5).is_err());
    }

    #[test]
    fn symmetric_pareto_tail_constants() {
        let pool = SamplePool::from_values(vec![pareto(1_000_000, 2.0, 2, true)]).unwrap();
        let tail = empirical_tail_constant(&pool, 0, 2.0, &Ladder::default()).unwrap();
        assert!(tail.converged && tail.converged_plus && tail.converged_minus);
        for r in &tail.total {
            assert!(r.estimate.contains(1.0) || (r.estimate.value - 1.0).abs() < 1.5 * r.estimate.half_width(), "{r:?}");
        }
        assert!((tail.c_plus().value - 0.5).abs() < 0.12);
        assert!((tail.c_minus().value - 0.5).abs() < 0.12);

        let flipped = SamplePool::from_values(vec![pool.x(0).iter().map(|v| -v).collect()]).unwrap();
        let back = empirical_tail_constant(&flipped, 0, 2.0, &Ladder::default()).unwrap();
        assert_eq!(back.plus, tail.minus);
        assert_eq!(back.minus, tail.plus);
    }

    #[test]
    fn zero_pool_gives_zero_ladders() {
        let pool = SamplePool::from_values(vec![vec![0.0; 1000]]).unwrap();
        let tail = empirical_tail_constant(&pool, 0, 2.0, &Ladder::default()).unwrap();
        assert!(tail.total.iter().all(|r| r.estimate == Estimate::exact(0.0)));
        let g = goldie_constant(&pool, 0, 2.0, 0.4).unwrap();
        assert_eq!(g.total, Estimate { value: 0.0, ci_lo: 0.0, ci_hi: 0.0, n: 1000 });
        let m = moment_estimate(&pool, 0, 1.0).unwrap();
        assert_eq!(m.estimate.value, 0.0);
        assert!(m.stable);
    }

    #[test]
    fn sparse_top_rung_asks_to_widen() {
        let pool = SamplePool::from_values(vec![pareto(2000, 2.0, 3, false)]).unwrap();
        assert!(matches!(empirical_tail_constant(&pool, 0, 2.0, &Ladder::default()), Err(Error::Insufficient(_))));
    }

    #[test]
    fn goldie_rejects_nonpositive_mean() {
        let pool = SamplePool::from_values(vec![vec![1.0; 10]]).unwrap();
        assert!(matches!(goldie_constant(&pool, 0, 2.0, 0.0), Err(Error::Precondition(_))));
        assert!(matches!(goldie_constant(&pool, 0, 2.0, f64::NAN), Err(Error::Precondition(_))));
    }

    #[test]
    fn quantile_ladder_resolution() {
        let sorted: Vec<f64> = (1..=1000).map(f64::from).collect();
        let t = Ladder::default().resolve(&sorted).unwrap();
        assert_eq!(t, vec![990.0, 995.0, 999.0, 1000.0, 1000.0]);
        assert_eq!(count_above(&sorted, 990.0), 10);
        assert!(Ladder::Thresholds { values: vec![2.0, 1.0] }.resolve(&sorted).is_err());
        assert!(Ladder::Quantiles { levels: vec![1.0] }.resolve(&sorted).is_err());
    }

    #[test]
    fn single_block_is_the_full_ladder() {
        let pool = SamplePool::from_values(vec![pareto(200_000, 2.0, 4, true), pareto(200_000, 1.0, 5, true)]).unwrap();
        let norm = AlphaNorm::new(vec![2.0, 1.0]).unwrap();
        let one = BlockPartition::from_classes(vec![vec![0, 1]], 2).unwrap();
        let ladder = Ladder::Quantiles { levels: vec![0.99, 0.995, 0.999] };
        let bt = block_tail_constant(&pool, &one, &norm, &ladder).unwrap();
        assert_eq!(bt.full, bt.blocks[0]);
        assert_eq!(bt.c_inf, bt.c_block[0]);
        assert!(bt.consistent);
    }

    #[test]
    fn independent_blocks_add_up() {
        let pool = SamplePool::from_values(vec![pareto(1_000_000, 2.0, 6, true), pareto(1_000_000, 2.0, 7, true)]).unwrap();
        let norm = AlphaNorm::new(vec![2.0, 2.0]).unwrap();
        let bt = block_tail_constant(&pool, &BlockPartition::singletons(2), &norm, &Ladder::default()).unwrap();
        assert!(bt.consistent, "{bt:?}");
        assert!((bt.c_inf.value / bt.c_block[0].value - 2.0).abs() < 0.5);
        assert!((bt.c_inf.value - 2.0).abs() < 3.0 * bt.c_inf.half_width());
    }

    #[test]
    fn bounded_pool_has_zero_block_constant() {
        let pool = SamplePool::from_values(vec![vec![1.0; 500], vec![2.0; 500]]).unwrap();
        let norm = AlphaNorm::new(vec![1.0, 1.0]).unwrap();
        let bt = block_tail_constant(&pool, &BlockPartition::singletons(2), &norm, &Ladder::default()).unwrap();
        assert_eq!(bt.c_inf.value, 0.0);
    }

    #[test]
    fn spectral_single_block_has_full_mass() {
        let pool = SamplePool::from_values(vec![pareto(100_000, 2.0, 8, true), pareto(100_000, 2.0, 9, true)]).unwrap();
        let norm = AlphaNorm::new(vec![2.0, 2.0]).unwrap();
        let one = BlockPartition::from_classes(vec![vec![0, 1]], 2).unwrap();
        let ladder = Ladder::Quantiles { levels: vec![0.99, 0.995, 0.999] };
        let sp = spectral_measure(&pool, &one, &norm, &ladder, DEFAULT_BINS, DEFAULT_EPS).unwrap();
        for r in &sp.rungs {
            assert_eq!(r.block_mass[0].value, 1.0);
            assert!((r.histogram.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_axis_pool_concentrates_on_axis() {
        let x1 = pareto(20_000, 2.0, 10, true);
        let pool = SamplePool::from_values(vec![x1, vec![0.0; 20_000]]).unwrap();
        let norm = AlphaNorm::new(vec![2.0, 1.5]).unwrap();
        let sp = spectral_measure(&pool, &BlockPartition::singletons(2), &norm, &Ladder::default(), 16, 0.05).unwrap();
        // 20 000 records leave fewer than 100 exceedances above the top three quantiles.
        assert_eq!(sp.dropped.len(), 3);
        for r in &sp.rungs {
            assert_eq!(r.block_mass[0].value, 1.0);
            assert_eq!(r.block_mass[1].value, 0.0);
            let Histogram::Product { mass, bins } = &r.histogram else { panic!() };
            // ω = (±1, 0): cells (0, 8) and (15, 8).
            assert!((mass[8] + mass[15 * bins + 8] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_marginal_summary_above_three_dimensions() {
        let cols: Vec<Vec<f64>> = (0..4).map(|j| pareto(50_000, 2.0, 20 + j, true)).collect();
        let pool = SamplePool::from_values(cols).unwrap();
        let norm = AlphaNorm::new(vec![2.0; 4]).unwrap();
        let ladder = Ladder::Quantiles { levels: vec![0.99, 0.995] };
        let sp = spectral_measure(&pool, &BlockPartition::singletons(4), &norm, &ladder, 16, 0.05).unwrap();
        let Histogram::Marginal { mass, .. } = &sp.rungs[0].histogram else { panic!() };
        assert_eq!(mass.len(), 4);
        assert!(mass.iter().all(|m| (m.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert!(sp.rungs.iter().all(|r| r.block_mass_total.value <= 1.0));
    }

    #[test]
    fn moment_dichotomy_on_pareto() {
        let pool = SamplePool::from_values(vec![pareto(1_000_000, 2.0, 11, false)]).unwrap();
        let low = moment_estimate(&pool, 0, 1.0).unwrap();
        assert!(low.stable, "{low:?}");
        assert!((low.estimate.value - 2.0).abs() < 0.02);
        let high = moment_estimate(&pool, 0, 4.0).unwrap();
        assert!(!high.stable, "{high:?}");
    }

    #[test]
    fn ladder_csv_has_header() {
        let rungs = vec![rung(10.0, 5, 100, 100.0)];
        let mut buf = Vec::new();
        write_ladder_csv(&rungs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,estimate,ci_lo,ci_hi\n10,5,"));
    }
}
