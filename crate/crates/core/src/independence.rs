//! Asymptotic independence across blocks and the submultiplicative weights
//! that sharpen the joint-exceedance decay.

use crate::error::{Error, Result};
use crate::model::{CoeffBatch, Model};
use crate::moments::{self, MomentEstimate};
use crate::rng::SeedSequence;
use crate::simulate::SamplePool;
use crate::stats::{self, Estimate};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Joint exceedance `|X_i| > r1 t^{1/α_i}`, `|X_j| > r2 t^{1/α_j}` at one `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointRung {
    pub t: f64,
    pub count: usize,
    pub probability: Estimate,
    /// `t P̂`.
    pub normalized: Estimate,
    /// No joint exceedance was seen; only `normalized.ci_hi` is informative.
    pub upper_bound_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLadder {
    pub i: usize,
    pub j: usize,
    pub r1: f64,
    pub r2: f64,
    pub rungs: Vec<JointRung>,
    /// `t P̂` strictly decreasing across the top three rungs, all with
    /// nonzero counts.
    pub decaying: bool,
}

impl JointLadder {
    pub fn top(&self) -> &JointRung {
        self.rungs.last().expect("nonempty ladder")
    }

    /// The intervals of the top three rungs share a point.
    pub fn flat(&self) -> bool {
        if self.rungs.len() < 3 {
            return false;
        }
        let top = &self.rungs[self.rungs.len() - 3..];
        let lo = top.iter().map(|r| r.normalized.ci_lo).fold(f64::NEG_INFINITY, f64::max);
        let hi = top.iter().map(|r| r.normalized.ci_hi).fold(f64::INFINITY, f64::min);
        lo <= hi
    }
}

pub fn joint_exceedance(
    pool: &SamplePool,
    i: usize,
    j: usize,
    alphas: (f64, f64),
    r: (f64, f64),
    ladder: &[f64],
) -> Result<JointLadder> {
    let d = pool.dim();
    for c in [i, j] {
        if c >= d {
            return Err(Error::Coordinate { index: c, dim: d });
        }
    }
    if !(alphas.0 > 0.0 && alphas.1 > 0.0 && r.0 > 0.0 && r.1 > 0.0) {
        return Err(Error::Domain("tail indices and radii must be positive".into()));
    }
    if ladder.is_empty() || ladder.iter().any(|&t| !(t > 0.0) || !t.is_finite()) || ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("joint ladder must be positive and strictly increasing"));
    }
    if pool.is_empty() {
        return Err(Error::Insufficient("empty pool".into()));
    }
    let (xi, xj) = (pool.x(i), pool.x(j));
    let n = pool.len();
    let rungs: Vec<JointRung> = ladder
        .par_iter()
        .map(|&t| {
            let (ui, uj) = (r.0 * t.powf(1.0 / alphas.0), r.1 * t.powf(1.0 / alphas.1));
            let count = crate::parallel::count(n, |k| xi[k].abs() > ui && xj[k].abs() > uj);
            let probability = stats::wilson(count, n);
            JointRung { t, count, probability, normalized: probability.scale(t), upper_bound_only: count == 0 }
        })
        .collect();
    let decaying = rungs.len() >= 3
        && rungs[rungs.len() - 3..].iter().all(|r| r.count > 0)
        && rungs[rungs.len() - 3..].windows(2).all(|w| w[1].normalized.value < w[0].normalized.value);
    Ok(JointLadder { i, j, r1: r.0, r2: r.1, rungs, decaying })
}

/// Least-squares fit of `log(t P̂) = log C - β log(1 + log t)`.
///
/// A consistency check on the direction of the decay bound, not an estimate
/// of a model constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub beta_hat: f64,
    pub log_c: f64,
    /// Per-rung relative residual `exp(resid) - 1`.
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    pub rungs_used: usize,
}

pub const MIN_FIT_RUNGS: usize = 4;

pub fn decay_rate_fit(rungs: &[JointRung]) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = rungs
        .iter()
        .filter(|r| r.count > 0 && r.t > 0.0)
        .map(|r| ((1.0 + r.t.ln().max(0.0)).ln(), r.normalized.value.ln()))
        .collect();
    decay_fit_points(&pts)
}

/// The fit on explicit `(t, t P̂)` pairs.
pub fn decay_rate_fit_values(ladder: &[(f64, f64)]) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = ladder
        .iter()
        .filter(|(t, v)| *t > 0.0 && *v > 0.0)
        .map(|&(t, v)| ((1.0 + t.ln().max(0.0)).ln(), v.ln()))
        .collect();
    decay_fit_points(&pts)
}

fn decay_fit_points(pts: &[(f64, f64)]) -> Result<DecayFit> {
    if pts.len() < MIN_FIT_RUNGS {
        return Err(Error::Insufficient(format!("decay fit needs {MIN_FIT_RUNGS} rungs with nonzero counts, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 1e-12) {
        return Err(Error::Insufficient("degenerate ladder: all rungs at the same log-log abscissa".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let log_c = my - slope * mx;
    let residuals: Vec<f64> = pts.iter().map(|p| (p.1 - (log_c + slope * p.0)).exp() - 1.0).collect();
    let max_abs_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(DecayFit { beta_hat: -slope, log_c, residuals, max_abs_residual, rungs_used: pts.len() })
}

/// A user-supplied scalar weight.
#[derive(Clone)]
pub struct CustomTau {
    pub name: String,
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomTau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomTau({})", self.name)
    }
}

impl PartialEq for CustomTau {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.f, &other.f)
    }
}

/// Weight `τ` on the multiplicative group. On a pair `(g1, g2)` every kind
/// acts as the tensor product `τ(g1) τ(g2)`, except `Product`, which applies
/// its left factor to `g1` and its right factor to `g2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TauSpec {
    /// `|g|^β`.
    Power { beta: f64 },
    /// `(1 + log(1 + |g|))^β`.
    Log { beta: f64 },
    /// `1 + log(1 + log(1 + |g|))`.
    Loglog,
    Product { left: Box<TauSpec>, right: Box<TauSpec> },
    #[serde(skip)]
    Custom(CustomTau),
}

impl TauSpec {
    pub fn custom(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TauSpec::Custom(CustomTau { name: name.to_string(), f: Arc::new(f) })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TauSpec::Power { beta } | TauSpec::Log { beta } if !(*beta >= 0.0) || !beta.is_finite() => {
                Err(Error::config(format!("tau exponent must be finite and nonnegative, got {beta}")))
            }
            TauSpec::Product { left, right } => {
                left.validate()?;
                right.validate()
            }
            _ => Ok(()),
        }
    }

    /// Scalar value `τ(g)`.
    pub fn eval(&self, g: f64) -> f64 {
        let m = g.abs();
        match self {
            TauSpec::Power { beta } => {
                if *beta == 0.0 {
                    1.0
                } else {
                    m.powf(*beta)
                }
            }
            TauSpec::Log { beta } => (1.0 + m.ln_1p()).powf(*beta),
            TauSpec::Loglog => 1.0 + m.ln_1p().ln_1p(),
            TauSpec::Product { left, right } => left.eval(g) * right.eval(g),
            TauSpec::Custom(c) => (c.f)(g),
        }
    }

    /// `τ(g1, g2)` on `ℝ²`.
    pub fn eval_pair(&self, g1: f64, g2: f64) -> f64 {
        match self {
            TauSpec::Product { left, right } => left.eval(g1) * right.eval(g2),
            _ => self.eval(g1) * self.eval(g2),
        }
    }

    /// Constants `(C1, C2)` with `τ(g) ≤ C1 (1 + |g|)^{C2}` for the scalar
    /// weight; `None` for custom weights.
    pub fn growth_bound(&self) -> Option<(f64, f64)> {
        match self {
            TauSpec::Power { beta } | TauSpec::Log { beta } => Some((1.0, *beta)),
            TauSpec::Loglog => Some((1.0, 1.0)),
            TauSpec::Product { left, right } => {
                let (a1, a2) = left.growth_bound()?;
                let (b1, b2) = right.growth_bound()?;
                Some((a1 * b1, a2 + b2))
            }
            TauSpec::Custom(_) => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TauSpec::Power { beta } => format!("power({beta})"),
            TauSpec::Log { beta } => format!("log({beta})"),
            TauSpec::Loglog => "loglog".into(),
            TauSpec::Product { left, right } => format!("product({}, {})", left.label(), right.label()),
            TauSpec::Custom(c) => format!("custom({})", c.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmultiplicativityReport {
    pub pass: bool,
    pub trials: usize,
    /// Largest `τ(gg') / (τ(g)τ(g'))` seen.
    pub worst_ratio: f64,
    pub worst_pair: [[f64; 2]; 2],
}

/// Relative rounding allowance; multiplicative weights hit equality.
const SUBMULT_SLACK: f64 = 1e-12;

/// Checks `τ(gg') ≤ τ(g)τ(g')` on `n` random pairs of points of `ℝ²` with
/// log-uniform moduli in `[1e-6, 1e6]` and random signs.
pub fn submultiplicativity_check(tau: &TauSpec, n: usize, seq: &SeedSequence) -> SubmultiplicativityReport {
    let mut rng = seq.derive("submultiplicativity").stream(0);
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let draw = |rng: &mut crate::rng::StreamRng| {
        let v = rng.random_range(lo..hi).exp();
        if rng.random::<bool>() {
            -v
        } else {
            v
        }
    };
    let mut worst = (f64::NEG_INFINITY, [[0.0; 2]; 2]);
    for _ in 0..n {
        let g = [draw(&mut rng), draw(&mut rng)];
        let h = [draw(&mut rng), draw(&mut rng)];
        let lhs = tau.eval_pair(g[0] * h[0], g[1] * h[1]);
        let rhs = tau.eval_pair(g[0], g[1]) * tau.eval_pair(h[0], h[1]);
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
        if ratio > worst.0 {
            worst = (ratio, [g, h]);
        }
    }
    SubmultiplicativityReport { pass: worst.0 <= 1.0 + SUBMULT_SLACK, trials: n, worst_ratio: worst.0, worst_pair: worst.1 }
}

pub const DEFAULT_XI: f64 = 0.5;
pub const XI_SCAN: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const GAMMA_GRID_POINTS: usize = 32;

/// 32 log-spaced points in `[1e-3, 1]`.
pub fn default_gamma_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 0.0);
    (0..GAMMA_GRID_POINTS)
        .map(|k| (lo + (hi - lo) * k as f64 / (GAMMA_GRID_POINTS - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub k: MomentEstimate,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaBound {
    pub i: usize,
    pub j: usize,
    pub xi: f64,
    pub tau: String,
    /// `k(0)`, the cross moment; strictly below 1 across blocks.
    pub cross_kappa: MomentEstimate,
    /// Largest passing `γ` (0 when none passes).
    pub gamma0: f64,
    pub k_at_gamma0: Option<MomentEstimate>,
    pub grid: Vec<GammaPoint>,
    /// The bisection midpoint evaluated between the last passing and the
    /// first failing grid point.
    pub refinement: Option<GammaPoint>,
}

fn k_gamma(batch: &CoeffBatch, i: usize, j: usize, si: f64, sj: f64, tau: &TauSpec, gamma: f64) -> MomentEstimate {
    let (ai, aj) = (batch.a(i), batch.a(j));
    let n = ai.len();
    let (half, full) = crate::parallel::nested_moments(n, |k| {
        let w = ai[k].abs().powf(si) * aj[k].abs().powf(sj);
        if w == 0.0 {
            0.0
        } else {
            tau.eval_pair(ai[k], aj[k]).powf(gamma) * w
        }
    });
    let estimate = Estimate::from_moments(&full);
    let stable = estimate.value.is_finite() && stats::relative_change(half.mean(), full.mean()) < moments::STABILITY_TOL;
    MomentEstimate { estimate, method: moments::MethodTag::MonteCarlo, stable }
}

/// A `γ` passes when the upper confidence bound of `k(γ)` is below 1.
fn passes(k: &MomentEstimate) -> bool {
    k.estimate.ci_hi < 1.0
}

/// Largest `γ` on the grid with
/// `k(γ) = E τ(A_i, A_j)^γ |A_i|^{α_i ξ} |A_j|^{α_j(1-ξ)} < 1`,
/// all grid points evaluated on the same batch.
#[allow(clippy::too_many_arguments)]
pub fn tau_gamma_bound(
    model: &Model,
    i: usize,
    j: usize,
    alphas: (f64, f64),
    tau: &TauSpec,
    xi: f64,
    gamma_grid: &[f64],
    batch: &CoeffBatch,
) -> Result<GammaBound> {
    tau.validate()?;
    model.check_coord(i)?;
    model.check_coord(j)?;
    if i == j {
        return Err(Error::Precondition("tau_gamma_bound needs two distinct coordinates".into()));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain(format!("xi must lie in (0, 1), got {xi}")));
    }
    if gamma_grid.is_empty() || gamma_grid.iter().any(|&g| !(g > 0.0)) || gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("gamma grid must be positive and strictly increasing"));
    }
    if batch.dim() != model.dim() || batch.is_empty() {
        return Err(Error::config("coefficient batch does not match the model"));
    }
    let (si, sj) = (alphas.0 * xi, alphas.1 * (1.0 - xi));
    let cross = moments::cross_kappa_on(batch, i, j, si, sj);
    if !(cross.estimate.ci_hi < 1.0) {
        return Err(Error::Precondition(format!(
            "cross moment at xi = {xi} is {:.6} with upper bound {:.6}; coordinates {i} and {j} look like the same block",
            cross.value(),
            cross.estimate.ci_hi
        )));
    }
    let grid: Vec<GammaPoint> = gamma_grid
        .par_iter()
        .map(|&gamma| {
            let k = k_gamma(batch, i, j, si, sj, tau, gamma);
            GammaPoint { gamma, pass: passes(&k), k }
        })
        .collect();
    let first = &grid[0];
    if !first.k.value().is_finite() || !first.k.stable {
        return Err(Error::TauTooHeavy(format!(
            "k({}) = {} is infinite or unstable: E|A|^α τ(A) appears infinite for {}",
            first.gamma,
            first.k.value(),
            tau.label()
        )));
    }
    let passing = grid.iter().take_while(|p| p.pass).count();
    let (mut gamma0, mut k_at_gamma0) =
        if passing == 0 { (0.0, None) } else { (grid[passing - 1].gamma, Some(grid[passing - 1].k)) };
    let mut refinement = None;
    if passing < grid.len() {
        let lo = if passing == 0 { 0.0 } else { grid[passing - 1].gamma };
        let mid = 0.5 * (lo + grid[passing].gamma);
        let k = k_gamma(batch, i, j, si, sj, tau, mid);
        let point = GammaPoint { gamma: mid, pass: passes(&k), k };
        if point.pass {
            gamma0 = mid;
            k_at_gamma0 = Some(k);
        }
        refinement = Some(point);
    }
    Ok(GammaBound { i, j, xi, tau: tau.label(), cross_kappa: cross, gamma0, k_at_gamma0, grid, refinement })
}

/// Runs [`tau_gamma_bound`] for every `ξ` in `xis` and returns the bound
/// with the largest `γ0` (the smallest `ξ` on ties) plus all bounds.
#[allow(clippy::too_many_arguments)]
pub fn tau_gamma_scan(
    model: &Model,
    i: usize,
    j: usize,
    alphas: (f64, f64),
    tau: &TauSpec,
    xis: &[f64],
    gamma_grid: &[f64],
    batch: &CoeffBatch,
) -> Result<(GammaBound, Vec<GammaBound>)> {
    let all: Vec<GammaBound> = xis
        .iter()
        .map(|&xi| tau_gamma_bound(model, i, j, alphas, tau, xi, gamma_grid, batch))
        .collect::<Result<_>>()?;
    let best = all
        .iter()
        .fold(None::<&GammaBound>, |best, b| match best {
            Some(x) if x.gamma0 >= b.gamma0 => Some(x),
            _ => Some(b),
        })
        .ok_or_else(|| Error::config("empty xi scan"))?
        .clone();
    Ok((best, all))
}
