//! Moment transforms `κ_j(s) = E|A_j|^s` and the tail index equation
//! `κ_j(α_j) = 1`.
//!
//! Every Monte Carlo quantity here is evaluated on a fixed [`CoeffBatch`],
//! so `s ↦ κ̂_j(s)` is a deterministic, log-convex function of `s` and the
//! root of `κ̂_j(s) = 1` is well defined.

use crate::error::{Error, Result};
use crate::model::{log_moment_on, CoeffBatch, Model};
use crate::parallel::{self, CHUNK};
use crate::stats::{relative_change, Estimate};
use serde::{Deserialize, Serialize};

/// Default solver tolerances on `|κ(α̂) - 1|`.
pub const TOL_CLOSED_FORM: f64 = 1e-8;
pub const TOL_MONTE_CARLO: f64 = 1e-3;
/// Default Monte Carlo batch size for moment work.
pub const DEFAULT_BATCH: usize = 1_000_000;
/// Relative change under doubling below which an estimate counts as stable.
pub const STABILITY_TOL: f64 = 0.05;

const MAX_BRACKET_STEPS: usize = 60;

/// How a moment is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// Analytic formula; an error if the family has none.
    ClosedForm,
    MonteCarlo(&'a CoeffBatch),
    /// Closed form when the family declares one, otherwise Monte Carlo.
    Auto(&'a CoeffBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub estimate: Estimate,
    pub method: MethodTag,
    /// False when the Monte Carlo mean moved by more than 5% between the
    /// first half of the batch and the full batch: the moment is possibly
    /// infinite.
    pub stable: bool,
}

impl MomentEstimate {
    fn exact(value: f64) -> Self {
        Self { estimate: Estimate::exact(value), method: MethodTag::ClosedForm, stable: value.is_finite() }
    }

    pub fn value(&self) -> f64 {
        self.estimate.value
    }
}

/// Mean of `f(k)` over the batch with a doubling-stability flag.
fn batch_mean<F>(n: usize, f: F) -> MomentEstimate
where
    F: Fn(usize) -> f64 + Sync,
{
    let (half, full) = parallel::nested_moments(n, f);
    let estimate = Estimate::from_moments(&full);
    let stable = estimate.value.is_finite() && relative_change(half.mean(), full.mean()) < STABILITY_TOL;
    MomentEstimate { estimate, method: MethodTag::MonteCarlo, stable }
}

enum Resolved<'a> {
    Closed,
    Batch(&'a CoeffBatch),
}

fn resolve<'a>(method: Method<'a>, closed_available: bool, what: &str) -> Result<Resolved<'a>> {
    match method {
        Method::ClosedForm if closed_available => Ok(Resolved::Closed),
        Method::ClosedForm => Err(Error::config(format!("no closed form for {what} in this family"))),
        Method::MonteCarlo(b) => Ok(Resolved::Batch(b)),
        Method::Auto(_) if closed_available => Ok(Resolved::Closed),
        Method::Auto(b) => Ok(Resolved::Batch(b)),
    }
}

fn check_batch(model: &Model, batch: &CoeffBatch) -> Result<()> {
    if batch.dim() != model.dim() || batch.is_empty() {
        return Err(Error::config("coefficient batch does not match the model"));
    }
    Ok(())
}

/// `κ_j(s) = E|A_j|^s`.
pub fn kappa(model: &Model, j: usize, s: f64, method: Method<'_>) -> Result<MomentEstimate> {
    model.check_coord(j)?;
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("kappa needs s >= 0, got {s}")));
    }
    match resolve(method, model.kappa_closed(j, s).is_some(), "kappa")? {
        Resolved::Closed => Ok(MomentEstimate::exact(model.kappa_closed(j, s).unwrap())),
        Resolved::Batch(batch) => {
            check_batch(model, batch)?;
            let a = batch.a(j);
            Ok(batch_mean(a.len(), |k| a[k].abs().powf(s)))
        }
    }
}

/// Evaluates `(κ(s), κ'(s))` for the root finder.
struct KappaFn<'a> {
    model: &'a Model,
    j: usize,
    batch: Option<&'a CoeffBatch>,
}

impl KappaFn<'_> {
    fn value(&self, s: f64) -> f64 {
        match self.batch {
            None => self.model.kappa_closed(self.j, s).unwrap(),
            Some(batch) => {
                let a = batch.a(self.j);
                let parts = parallel::map_chunks(a.len(), CHUNK, |_, r| r.map(|k| a[k].abs().powf(s)).sum::<f64>());
                parts.iter().sum::<f64>() / a.len() as f64
            }
        }
    }

    fn log_value(&self, s: f64) -> f64 {
        self.value(s).ln()
    }
}

/// Result of solving `κ_j(α) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSolution {
    pub alpha: f64,
    pub kappa_at_root: f64,
    pub iterations: usize,
    pub method: MethodTag,
    /// Initial guess from the cumulants of `log|A_j|`.
    pub pilot: f64,
}

/// Solves `κ_j(α) = 1` on `(0, s_∞)` by bracketing and Brent iteration on
/// `log κ_j`.
pub fn solve_alpha(model: &Model, j: usize, tol: f64, method: Method<'_>) -> Result<AlphaSolution> {
    model.check_coord(j)?;
    if !(tol > 0.0) {
        return Err(Error::config("solver tolerance must be positive"));
    }
    let resolved = resolve(method, model.kappa_closed(j, 1.0).is_some(), "kappa")?;
    let (f, tag) = match resolved {
        Resolved::Closed => (KappaFn { model, j, batch: None }, MethodTag::ClosedForm),
        Resolved::Batch(b) => {
            check_batch(model, b)?;
            (KappaFn { model, j, batch: Some(b) }, MethodTag::MonteCarlo)
        }
    };

    // P(A_j ≠ 0) and E[log|A_j|; A_j ≠ 0] for the precondition and the pilot.
    let (nonzero, mean_log) = match f.batch {
        None => {
            let nonzero = f.value(f64::MIN_POSITIVE);
            let mean_log = model
                .kappa_deriv_closed(j, 0.0)
                .map(|m| m / nonzero)
                .or_else(|| model.log_moment_closed(j))
                .unwrap_or(f64::NAN);
            (nonzero, mean_log)
        }
        Some(batch) => {
            let lm = log_moment_on(batch, j);
            (1.0 - lm.zero_mass, lm.conditional.value)
        }
    };
    if nonzero == 0.0 {
        return Err(Error::NoTailIndex { coord: j, reason: "A_j = 0 almost surely".into() });
    }
    if nonzero >= 1.0 && !(mean_log < 0.0) {
        return Err(Error::NoTailIndex {
            coord: j,
            reason: format!("E log|A_j| = {mean_log} is not negative"),
        });
    }

    // Quadratic model log κ(s) ≈ log P(A≠0) + μ s + c s² matched at s = 1.
    let c0 = nonzero.ln();
    let f1 = f.log_value(1.0);
    let slope = if mean_log.is_finite() { mean_log } else { f1 - c0 };
    let curv = f1 - c0 - slope;
    let pilot = if curv > 0.0 {
        let disc = slope * slope - 4.0 * curv * c0;
        (-slope + disc.max(0.0).sqrt()) / (2.0 * curv)
    } else {
        1.0
    };
    let pilot = if pilot.is_finite() && pilot > 0.0 { pilot } else { 1.0 };

    let mut lo = pilot / 2.0;
    let mut f_lo = f.log_value(lo);
    let mut steps = 0;
    while !(f_lo < 0.0) {
        steps += 1;
        if steps > MAX_BRACKET_STEPS {
            return Err(Error::NoTailIndex { coord: j, reason: "log kappa not negative near 0".into() });
        }
        lo /= 2.0;
        f_lo = f.log_value(lo);
    }
    let mut hi = (2.0 * pilot).max(lo * 2.0);
    let mut f_hi = f.log_value(hi);
    let mut infinite_at: Option<f64> = None;
    steps = 0;
    loop {
        steps += 1;
        if steps > 4 * MAX_BRACKET_STEPS {
            return Err(Error::NoTailIndex { coord: j, reason: "bracket search exhausted".into() });
        }
        if !f_hi.is_finite() {
            // Shrink back toward the last finite point.
            infinite_at = Some(hi);
            hi = 0.5 * (lo + hi);
            if (hi - lo) <= 1e-12 * hi {
                return Err(Error::NoTailIndex { coord: j, reason: "kappa infinite before crossing 1".into() });
            }
        } else if f_hi > 0.0 {
            break;
        } else {
            lo = hi;
            f_lo = f_hi;
            hi = match infinite_at {
                Some(bad) => 0.5 * (hi + bad),
                None => 2.0 * hi,
            };
            if steps > MAX_BRACKET_STEPS && infinite_at.is_none() {
                return Err(Error::NoTailIndex {
                    coord: j,
                    reason: format!("kappa stays below 1 up to s = {hi}"),
                });
            }
            if let Some(bad) = infinite_at {
                if (bad - lo) <= 1e-12 * bad {
                    return Err(Error::NoTailIndex { coord: j, reason: "kappa infinite before crossing 1".into() });
                }
            }
        }
        f_hi = f.log_value(hi);
    }

    let (alpha, iterations) = brent(|s| f.log_value(s), lo, hi, f_lo, f_hi, tol);
    let kappa_at_root = f.value(alpha);
    Ok(AlphaSolution { alpha, kappa_at_root, iterations, method: tag, pilot })
}

/// Brent's method for a sign change `f(a) < 0 < f(b)`; stops when
/// `|e^{f} - 1| ≤ tol` or the bracket collapses.
fn brent(f: impl Fn(f64) -> f64, a0: f64, b0: f64, fa0: f64, fb0: f64, tol: f64) -> (f64, usize) {
    let (mut a, mut b, mut fa, mut fb) = (a0, b0, fa0, fb0);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let x_tol = 2.0 * f64::EPSILON * b.abs();
        let m = 0.5 * (c - b);
        if fb.exp_m1().abs() <= tol * 0.5 || m.abs() <= x_tol || fb == 0.0 {
            return (b, iter);
        }
        if e.abs() >= x_tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (x_tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > x_tol { d } else { x_tol.copysign(m) };
        fb = f(b);
    }
    (b, 200)
}

/// Goldie mean `m_j = E|A_j|^{α_j} log|A_j|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldieMean {
    pub mean: MomentEstimate,
    /// The estimate (or its whole interval) is not positive: the supplied
    /// `α_j` is probably not the root of `κ_j(s) = 1`.
    pub nonpositive: bool,
}

pub fn goldie_mean(model: &Model, j: usize, alpha: f64, method: Method<'_>) -> Result<GoldieMean> {
    model.check_coord(j)?;
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let mean = match resolve(method, model.kappa_deriv_closed(j, alpha).is_some(), "goldie mean")? {
        Resolved::Closed => MomentEstimate::exact(model.kappa_deriv_closed(j, alpha).unwrap()),
        Resolved::Batch(batch) => {
            check_batch(model, batch)?;
            let a = batch.a(j);
            batch_mean(a.len(), |k| {
                let m = a[k].abs();
                if m == 0.0 {
                    0.0
                } else {
                    m.powf(alpha) * m.ln()
                }
            })
        }
    };
    let nonpositive = !(mean.estimate.ci_lo > 0.0);
    if nonpositive {
        log::warn!("goldie mean for coordinate {j} is not positive ({:?}); check alpha", mean.estimate);
    }
    Ok(GoldieMean { mean, nonpositive })
}

/// `E|A_i|^{α_i ξ} |A_j|^{α_j (1-ξ)}`, the total mass of the χ_ξ-tilted
/// coefficient law. It equals 1 when `|A_i|^{α_i} = |A_j|^{α_j}` a.s. and
/// is strictly below 1 otherwise.
pub fn cross_kappa(
    model: &Model,
    i: usize,
    j: usize,
    alpha_i: f64,
    alpha_j: f64,
    xi: f64,
    method: Method<'_>,
) -> Result<MomentEstimate> {
    model.check_coord(i)?;
    model.check_coord(j)?;
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain(format!("xi must lie in (0, 1), got {xi}")));
    }
    let (si, sj) = (alpha_i * xi, alpha_j * (1.0 - xi));
    match resolve(method, model.cross_closed(i, j, si, sj).is_some(), "cross moment")? {
        Resolved::Closed => Ok(MomentEstimate::exact(model.cross_closed(i, j, si, sj).unwrap())),
        Resolved::Batch(batch) => {
            check_batch(model, batch)?;
            Ok(cross_kappa_on(batch, i, j, si, sj))
        }
    }
}

pub(crate) fn cross_kappa_on(batch: &CoeffBatch, i: usize, j: usize, si: f64, sj: f64) -> MomentEstimate {
    let (ai, aj) = (batch.a(i), batch.a(j));
    batch_mean(ai.len(), |k| ai[k].abs().powf(si) * aj[k].abs().powf(sj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbscissaPoint {
    pub s: f64,
    pub kappa: MomentEstimate,
    pub b_moment: MomentEstimate,
    pub stable: bool,
}

/// Heuristic moment abscissa `s_∞ = sup{s : E|A_j|^s + E|B_j|^s < ∞}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAbscissa {
    /// Largest grid point before the first unstable one, or `+∞`.
    pub estimate: f64,
    /// All grid points were stable but the family is not known to have
    /// all moments, so `estimate` is only a lower bound.
    pub lower_bound_only: bool,
    pub points: Vec<AbscissaPoint>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("grid must be nonempty, positive, finite and increasing"));
    }
    Ok(())
}

/// Scans `grid` upward; a point is stable when both `κ̂_j(s)` and
/// `E|B_j|^s` change by less than 5% when the batch size doubles.
pub fn moment_abscissa(model: &Model, j: usize, grid: &[f64], batch: &CoeffBatch) -> Result<MomentAbscissa> {
    model.check_coord(j)?;
    check_grid(grid)?;
    check_batch(model, batch)?;
    let b = batch.b(j);
    let mut points = Vec::with_capacity(grid.len());
    let mut estimate = None;
    for (idx, &s) in grid.iter().enumerate() {
        let kappa = kappa(model, j, s, Method::Auto(batch))?;
        let b_moment = batch_mean(b.len(), |k| b[k].abs().powf(s));
        let stable = kappa.stable && b_moment.stable;
        points.push(AbscissaPoint { s, kappa, b_moment, stable });
        if !stable && estimate.is_none() {
            estimate = Some(if idx == 0 { 0.0 } else { grid[idx - 1] });
        }
    }
    let (estimate, lower_bound_only) = match estimate {
        Some(s) => (s, false),
        None if model.a_light_tailed() && model.b_light_tailed(j) => (f64::INFINITY, false),
        None => (*grid.last().unwrap(), true),
    };
    Ok(MomentAbscissa { estimate, lower_bound_only, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Satisfied,
    Inconclusive,
}

/// Evaluation of the sufficient condition for `c_+ + c_- > 0`:
/// `E|B|^s / κ(s)` bounded when `s_∞ = ∞`, or tending to 0 as `s → s_∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityDiagnosis {
    pub verdict: Verdict,
    /// `(s, E|B_j|^s / κ_j(s))` over the stable part of the grid.
    pub ratios: Vec<(f64, f64)>,
    pub s_inf: f64,
    /// `B ≡ 0`: the ratio vanishes, but the fixed point is `X ≡ 0`.
    pub degenerate_fixed_point: bool,
}

pub fn positivity_check(
    model: &Model,
    j: usize,
    alpha: f64,
    grid: &[f64],
    batch: &CoeffBatch,
) -> Result<PositivityDiagnosis> {
    let abscissa = moment_abscissa(model, j, grid, batch)?;
    let s_inf = abscissa.estimate;
    let ratios: Vec<(f64, f64)> = abscissa
        .points
        .iter()
        .filter(|p| p.s <= s_inf)
        .map(|p| (p.s, p.b_moment.value() / p.kappa.value()))
        .collect();
    let degenerate = model.b_is_zero() || batch.b(j).iter().all(|&x| x == 0.0);
    if degenerate {
        return Ok(PositivityDiagnosis { verdict: Verdict::Satisfied, ratios, s_inf, degenerate_fixed_point: true });
    }
    let r: Vec<f64> = ratios.iter().map(|p| p.1).collect();
    let verdict = if !(alpha < s_inf) || r.len() < 2 {
        Verdict::Inconclusive
    } else if s_inf.is_infinite() {
        let last = r[r.len() - 1];
        let earlier = r[..r.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if last <= (1.0 + STABILITY_TOL) * earlier {
            Verdict::Satisfied
        } else {
            Verdict::Inconclusive
        }
    } else {
        let tail = &r[r.len().saturating_sub(3)..];
        let decreasing = tail.windows(2).all(|w| w[1] < w[0]);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if decreasing && tail[tail.len() - 1] <= 0.1 * max {
            Verdict::Satisfied
        } else {
            Verdict::Inconclusive
        }
    };
    Ok(PositivityDiagnosis { verdict, ratios, s_inf, degenerate_fixed_point: false })
}

/// Per-coordinate tail quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProfile {
    pub alpha: Vec<f64>,
    pub goldie_mean: Vec<Estimate>,
    pub s_inf: Vec<f64>,
    pub method_tags: Vec<MethodTag>,
    /// Half-width of the κ interval at the root (0 for closed forms).
    pub kappa_ci_half_width: Vec<f64>,
    /// `E|B_j|^{α_j + σ}` judged finite from the abscissa scan.
    pub moment_margin_ok: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ProfileOptions {
    pub tol_closed: f64,
    pub tol_monte_carlo: f64,
    pub abscissa_grid: Vec<f64>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            tol_closed: TOL_CLOSED_FORM,
            tol_monte_carlo: TOL_MONTE_CARLO,
            abscissa_grid: (1..=16).map(|k| 0.5 * k as f64).collect(),
        }
    }
}

impl TailProfile {
    /// Solves every coordinate, preferring closed forms.
    pub fn compute(model: &Model, batch: &CoeffBatch, opts: &ProfileOptions) -> Result<Self> {
        let d = model.dim();
        let mut p = TailProfile {
            alpha: Vec::with_capacity(d),
            goldie_mean: Vec::with_capacity(d),
            s_inf: Vec::with_capacity(d),
            method_tags: Vec::with_capacity(d),
            kappa_ci_half_width: Vec::with_capacity(d),
            moment_margin_ok: Vec::with_capacity(d),
        };
        for j in 0..d {
            let closed = model.kappa_closed(j, 1.0).is_some();
            let tol = if closed { opts.tol_closed } else { opts.tol_monte_carlo };
            let sol = solve_alpha(model, j, tol, Method::Auto(batch))?;
            let gm = goldie_mean(model, j, sol.alpha, Method::Auto(batch))?;
            let k = kappa(model, j, sol.alpha, Method::Auto(batch))?;
            let abscissa = moment_abscissa(model, j, &opts.abscissa_grid, batch)?;
            let s_inf = match model.b_abscissa_closed(j) {
                Some(exact) if model.a_light_tailed() => exact,
                _ => abscissa.estimate,
            };
            p.moment_margin_ok.push(sol.alpha + model.spec().sigma_margin < s_inf);
            p.alpha.push(sol.alpha);
            p.goldie_mean.push(gm.mean.estimate);
            p.s_inf.push(s_inf);
            p.method_tags.push(sol.method);
            p.kappa_ci_half_width.push(k.estimate.half_width());
        }
        Ok(p)
    }
}
