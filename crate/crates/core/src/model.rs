//! Joint laws of the diagonal coefficient `A = diag(A_1, ..., A_d)` and the
//! additive term `B`.
//!
//! A [`ModelSpec`] is the serialisable description; [`Model`] is the
//! validated form that owns precomputed factorisations and is shared
//! read-only by all workers.

use crate::error::{Error, Result};
use crate::parallel::{self, RunningMoments, CHUNK};
use crate::rng::{SeedSequence, StreamRng};
use crate::stats::Estimate;
use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{digamma, ln_gamma};
use std::fmt;
use std::sync::Arc;

/// How the per-coordinate draws of a family are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Independent,
    /// All coordinates are driven by one uniform variate.
    Comonotone,
}

/// One-dimensional law used for the entries of `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ScalarLaw {
    Constant { value: f64 },
    Exp { rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Pareto { scale: f64, index: f64 },
    Normal { mean: f64, sd: f64 },
}

impl ScalarLaw {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarLaw::Constant { value } => value.is_finite(),
            ScalarLaw::Exp { rate } => rate > 0.0 && rate.is_finite(),
            ScalarLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ScalarLaw::Pareto { scale, index } => scale > 0.0 && index > 0.0 && scale.is_finite(),
            ScalarLaw::Normal { mean, sd } => mean.is_finite() && sd >= 0.0 && sd.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid B law parameters: {self:?}")))
        }
    }

    /// Quantile function on `(0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            ScalarLaw::Constant { value } => value,
            ScalarLaw::Exp { rate } => -(-u).ln_1p() / rate,
            ScalarLaw::Uniform { lo, hi } => lo + (hi - lo) * u,
            ScalarLaw::Pareto { scale, index } => scale * (1.0 - u).powf(-1.0 / index),
            ScalarLaw::Normal { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    mean + sd * standard_normal().inverse_cdf(u)
                }
            }
        }
    }

    /// All absolute moments are finite.
    pub fn is_light_tailed(&self) -> bool {
        !matches!(self, ScalarLaw::Pareto { .. })
    }

    pub fn is_zero(&self) -> bool {
        matches!(*self, ScalarLaw::Constant { value } if value == 0.0)
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Law of the additive vector `B` for the built-in families; independent of `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSpec {
    /// Either one law applied to every coordinate or one law per coordinate.
    pub laws: Vec<ScalarLaw>,
    #[serde(default)]
    pub coupling: Coupling,
}

impl Default for BSpec {
    fn default() -> Self {
        Self { laws: vec![ScalarLaw::Constant { value: 1.0 }], coupling: Coupling::Independent }
    }
}

impl BSpec {
    pub fn iid(law: ScalarLaw) -> Self {
        Self { laws: vec![law], coupling: Coupling::Independent }
    }

    pub fn shared(law: ScalarLaw) -> Self {
        Self { laws: vec![law], coupling: Coupling::Comonotone }
    }

    pub fn law(&self, j: usize) -> &ScalarLaw {
        if self.laws.len() == 1 {
            &self.laws[0]
        } else {
            &self.laws[j]
        }
    }
}

/// A discrete atom of a table-driven joint law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// User-supplied joint sampler for `(A, B)`.
///
/// `A` and `B` may be dependent. Implementations that know `E|A_j|^s` in
/// closed form can expose it through [`JointLaw::kappa`]; otherwise every
/// moment computation falls back to Monte Carlo.
pub trait JointLaw: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut StreamRng, a: &mut [f64], b: &mut [f64]);
    fn kappa(&self, _j: usize, _s: f64) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct SharedLaw(pub Arc<dyn JointLaw>);

impl PartialEq for SharedLaw {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum Family {
    /// `P(A_j = up_j) = p_j`, `P(A_j = down_j) = 1 - p_j`.
    TwoPoint {
        p: Vec<f64>,
        up: Vec<f64>,
        down: Vec<f64>,
        #[serde(default)]
        coupling: Coupling,
    },
    /// `A_j = exp(mu_j + sigma_j N_j)` with correlated standard normals.
    LogNormal {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        #[serde(default)]
        correlation: Option<Vec<f64>>,
    },
    /// `A_j = a_j Z_j^2 + b_j` with correlated standard normals.
    #[serde(rename = "CCCGarch")]
    CccGarch {
        a: Vec<f64>,
        b: Vec<f64>,
        #[serde(default)]
        correlation: Option<Vec<f64>>,
    },
    /// `A_j = sum_i m_i loadings[i][j]` with i.i.d. standard normal `m_i`.
    BekkDiag { loadings: Vec<Vec<f64>> },
    /// Table-driven joint law of `(A, B)`; the `b` field of the spec is ignored.
    Custom { atoms: Vec<Atom> },
    #[serde(skip)]
    Sampler(SharedLaw),
}

fn default_sigma_margin() -> f64 {
    0.1
}

/// Serialisable description of the joint law of `(A, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    #[serde(flatten)]
    pub family: Family,
    #[serde(default)]
    pub b_law: BSpec,
    /// Moment surplus `σ` in `E|B_j|^{α_j + σ} < ∞`.
    #[serde(default = "default_sigma_margin")]
    pub sigma_margin: f64,
}

impl ModelSpec {
    pub fn two_point(p: f64, up: f64, down: f64, b: ScalarLaw) -> Self {
        Self {
            d: 1,
            family: Family::TwoPoint { p: vec![p], up: vec![up], down: vec![down], coupling: Coupling::Independent },
            b_law: BSpec::iid(b),
            sigma_margin: default_sigma_margin(),
        }
    }

    pub fn log_normal(mu: f64, sigma: f64, b: ScalarLaw) -> Self {
        Self {
            d: 1,
            family: Family::LogNormal { mu: vec![mu], sigma: vec![sigma], correlation: None },
            b_law: BSpec::iid(b),
            sigma_margin: default_sigma_margin(),
        }
    }

    pub fn custom(law: Arc<dyn JointLaw>) -> Self {
        Self {
            d: law.dim(),
            family: Family::Sampler(SharedLaw(law)),
            b_law: BSpec::default(),
            sigma_margin: default_sigma_margin(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("model spec: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = match &self.family {
            Family::Sampler(law) => format!("sampler:{}:{}", law.0.name(), self.d),
            _ => serde_json::to_string(self).expect("serialisable spec"),
        };
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Lower-triangular factor `L` with `L L^T = C` for a positive semidefinite
/// correlation matrix. Zero pivots are allowed and yield zero columns.
fn psd_factor(corr: &[f64], d: usize) -> Result<Vec<f64>> {
    if corr.len() != d * d {
        return Err(Error::config(format!("correlation matrix has {} entries, expected {}", corr.len(), d * d)));
    }
    for i in 0..d {
        if (corr[i * d + i] - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("correlation diagonal entry {i} is not 1")));
        }
        for j in 0..i {
            let (x, y) = (corr[i * d + j], corr[j * d + i]);
            if !x.is_finite() || (x - y).abs() > 1e-12 || x.abs() > 1.0 {
                return Err(Error::config(format!("correlation entry ({i},{j}) invalid or asymmetric")));
            }
        }
    }
    const PIVOT_TOL: f64 = 1e-10;
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = corr[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag < -PIVOT_TOL {
            return Err(Error::NotPositiveSemidefinite { row: j, pivot: diag });
        }
        if diag <= PIVOT_TOL {
            // Column j is a linear combination of earlier ones; the remaining
            // rows must already be reproduced exactly.
            for i in (j + 1)..d {
                let mut off = corr[i * d + j];
                for k in 0..j {
                    off -= l[i * d + k] * l[j * d + k];
                }
                if off.abs() > 1e-8 {
                    return Err(Error::NotPositiveSemidefinite { row: i, pivot: off });
                }
            }
            continue;
        }
        let root = diag.sqrt();
        l[j * d + j] = root;
        for i in (j + 1)..d {
            let mut off = corr[i * d + j];
            for k in 0..j {
                off -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = off / root;
        }
    }
    Ok(l)
}

#[derive(Debug, Clone)]
enum Kernel {
    TwoPoint { p: Vec<f64>, up: Vec<f64>, down: Vec<f64>, coupling: Coupling },
    LogNormal { mu: Vec<f64>, sigma: Vec<f64>, factor: Vec<f64> },
    CccGarch { a: Vec<f64>, b: Vec<f64>, factor: Vec<f64> },
    Bekk { loadings: Vec<Vec<f64>>, sd: Vec<f64> },
    Table { cumulative: Vec<f64>, atoms: Vec<Atom> },
    Sampler(Arc<dyn JointLaw>),
}

/// A validated model, immutable and shareable across workers.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    kernel: Kernel,
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::config(format!("{name} has length {}, expected {d}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let d = spec.d;
        if d == 0 {
            return Err(Error::config("dimension must be at least 1"));
        }
        if !(spec.sigma_margin > 0.0) {
            return Err(Error::config("sigma_margin must be positive"));
        }
        let kernel = match &spec.family {
            Family::TwoPoint { p, up, down, coupling } => {
                check_len("p", p, d)?;
                check_len("up", up, d)?;
                check_len("down", down, d)?;
                if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::config("two-point probabilities must lie in [0, 1]"));
                }
                Kernel::TwoPoint { p: p.clone(), up: up.clone(), down: down.clone(), coupling: *coupling }
            }
            Family::LogNormal { mu, sigma, correlation } => {
                check_len("mu", mu, d)?;
                check_len("sigma", sigma, d)?;
                if sigma.iter().any(|&s| s < 0.0) {
                    return Err(Error::config("log-normal sigma must be nonnegative"));
                }
                Kernel::LogNormal { mu: mu.clone(), sigma: sigma.clone(), factor: factor_or_identity(correlation, d)? }
            }
            Family::CccGarch { a, b, correlation } => {
                check_len("a", a, d)?;
                check_len("b", b, d)?;
                if a.iter().any(|&x| x < 0.0) || b.iter().any(|&x| x < 0.0) {
                    return Err(Error::config("CCC-GARCH requires a_j >= 0 and b_j >= 0"));
                }
                Kernel::CccGarch { a: a.clone(), b: b.clone(), factor: factor_or_identity(correlation, d)? }
            }
            Family::BekkDiag { loadings } => {
                if loadings.is_empty() {
                    return Err(Error::config("BEKK loadings must have at least one row"));
                }
                for (i, row) in loadings.iter().enumerate() {
                    check_len(&format!("loadings[{i}]"), row, d)?;
                }
                let sd = (0..d).map(|j| loadings.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
                Kernel::Bekk { loadings: loadings.clone(), sd }
            }
            Family::Custom { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::config("custom table needs at least one atom"));
                }
                let mut total = 0.0;
                for (k, atom) in atoms.iter().enumerate() {
                    check_len(&format!("atoms[{k}].a"), &atom.a, d)?;
                    check_len(&format!("atoms[{k}].b"), &atom.b, d)?;
                    if !(atom.weight >= 0.0) || !atom.weight.is_finite() {
                        return Err(Error::config("atom weights must be finite and nonnegative"));
                    }
                    total += atom.weight;
                }
                if total <= 0.0 {
                    return Err(Error::config("atom weights sum to zero"));
                }
                let mut acc = 0.0;
                let cumulative = atoms
                    .iter()
                    .map(|a| {
                        acc += a.weight / total;
                        acc
                    })
                    .collect();
                Kernel::Table { cumulative, atoms: atoms.clone() }
            }
            Family::Sampler(law) => {
                if law.0.dim() != d {
                    return Err(Error::config("sampler dimension disagrees with d"));
                }
                Kernel::Sampler(Arc::clone(&law.0))
            }
        };
        if !matches!(kernel, Kernel::Table { .. } | Kernel::Sampler(_)) {
            if spec.b_law.laws.len() != 1 && spec.b_law.laws.len() != d {
                return Err(Error::config("B laws must have length 1 or d"));
            }
            for law in &spec.b_law.laws {
                law.validate()?;
            }
        }
        Ok(Self { spec, kernel })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.d
    }

    pub fn check_coord(&self, j: usize) -> Result<()> {
        if j < self.dim() {
            Ok(())
        } else {
            Err(Error::Coordinate { index: j, dim: self.dim() })
        }
    }

    pub fn sampler(&self) -> CoeffSampler<'_> {
        CoeffSampler { model: self, normals: vec![0.0; self.dim()] }
    }

    /// One draw of `(A, B)`.
    pub fn sample_pair(&self, rng: &mut StreamRng) -> CoeffSample {
        let mut s = CoeffSample { a: vec![0.0; self.dim()], b: vec![0.0; self.dim()] };
        self.sampler().draw(rng, &mut s.a, &mut s.b);
        s
    }

    /// `E|A_j|^s` in closed form, when the family admits one.
    pub fn kappa_closed(&self, j: usize, s: f64) -> Option<f64> {
        match &self.kernel {
            Kernel::TwoPoint { p, up, down, .. } => Some(p[j] * up[j].abs().powf(s) + (1.0 - p[j]) * down[j].abs().powf(s)),
            Kernel::LogNormal { mu, sigma, .. } => Some((mu[j] * s + 0.5 * sigma[j] * sigma[j] * s * s).exp()),
            Kernel::Bekk { sd, .. } => Some(normal_abs_moment(sd[j], s)),
            Kernel::Table { atoms, .. } => Some(table_expect(atoms, |atom| atom.a[j].abs().powf(s))),
            Kernel::Sampler(law) => law.kappa(j, s),
            Kernel::CccGarch { .. } => None,
        }
    }

    /// `E|A_j|^s log|A_j|` (the s-derivative of `kappa`) in closed form.
    pub fn kappa_deriv_closed(&self, j: usize, s: f64) -> Option<f64> {
        let xlogx = |x: f64| {
            let m = x.abs();
            if m == 0.0 {
                0.0
            } else {
                m.powf(s) * m.ln()
            }
        };
        match &self.kernel {
            Kernel::TwoPoint { p, up, down, .. } => Some(p[j] * xlogx(up[j]) + (1.0 - p[j]) * xlogx(down[j])),
            Kernel::LogNormal { mu, sigma, .. } => {
                let v = sigma[j] * sigma[j];
                Some((mu[j] * s + 0.5 * v * s * s).exp() * (mu[j] + v * s))
            }
            Kernel::Bekk { sd, .. } => {
                if sd[j] == 0.0 {
                    return Some(0.0);
                }
                let k = normal_abs_moment(sd[j], s);
                Some(k * ((sd[j] * std::f64::consts::SQRT_2).ln() + 0.5 * digamma(0.5 * (s + 1.0))))
            }
            Kernel::Table { atoms, .. } => Some(table_expect(atoms, |atom| xlogx(atom.a[j]))),
            Kernel::Sampler(_) | Kernel::CccGarch { .. } => None,
        }
    }

    /// `E|A_i|^{s_i} |A_j|^{s_j}` in closed form, when available.
    pub fn cross_closed(&self, i: usize, j: usize, si: f64, sj: f64) -> Option<f64> {
        if i == j {
            return self.kappa_closed(i, si + sj);
        }
        match &self.kernel {
            Kernel::TwoPoint { p, up, down, coupling } => {
                let (ui, di) = (up[i].abs().powf(si), down[i].abs().powf(si));
                let (uj, dj) = (up[j].abs().powf(sj), down[j].abs().powf(sj));
                match coupling {
                    Coupling::Independent => Some((p[i] * ui + (1.0 - p[i]) * di) * (p[j] * uj + (1.0 - p[j]) * dj)),
                    Coupling::Comonotone => {
                        let both_up = p[i].min(p[j]);
                        let both_down = 1.0 - p[i].max(p[j]);
                        let up_i_only = (p[i] - p[j]).max(0.0);
                        let up_j_only = (p[j] - p[i]).max(0.0);
                        Some(both_up * ui * uj + both_down * di * dj + up_i_only * ui * dj + up_j_only * di * uj)
                    }
                }
            }
            Kernel::LogNormal { mu, sigma, factor } => {
                let d = self.dim();
                let rho: f64 = (0..d).map(|k| factor[i * d + k] * factor[j * d + k]).sum();
                let (vi, vj) = (si * sigma[i], sj * sigma[j]);
                Some((si * mu[i] + sj * mu[j] + 0.5 * (vi * vi + vj * vj + 2.0 * rho * vi * vj)).exp())
            }
            Kernel::Table { atoms, .. } => Some(table_expect(atoms, |a| a.a[i].abs().powf(si) * a.a[j].abs().powf(sj))),
            _ => None,
        }
    }

    /// `E log|A_j|` given `A_j ≠ 0`, in closed form.
    pub fn log_moment_closed(&self, j: usize) -> Option<f64> {
        match &self.kernel {
            Kernel::LogNormal { mu, .. } => Some(mu[j]),
            Kernel::TwoPoint { p, up, down, .. } => {
                let (u, dn) = (up[j].abs(), down[j].abs());
                match (u > 0.0, dn > 0.0) {
                    (true, true) => Some(p[j] * u.ln() + (1.0 - p[j]) * dn.ln()),
                    (true, false) => Some(u.ln()),
                    (false, true) => Some(dn.ln()),
                    (false, false) => None,
                }
            }
            _ => None,
        }
    }

    /// True when the family's coefficient has all absolute moments finite.
    pub fn a_light_tailed(&self) -> bool {
        !matches!(self.kernel, Kernel::Sampler(_))
    }

    /// True when `E|B_j|^s < ∞` for every `s`.
    pub fn b_light_tailed(&self, j: usize) -> bool {
        match &self.kernel {
            Kernel::Table { .. } => true,
            Kernel::Sampler(_) => false,
            _ => self.spec.b_law.law(j).is_light_tailed(),
        }
    }

    /// Exact moment cutoff of `B_j` when the law is known.
    pub fn b_abscissa_closed(&self, j: usize) -> Option<f64> {
        match &self.kernel {
            Kernel::Table { .. } => Some(f64::INFINITY),
            Kernel::Sampler(_) => None,
            _ => match self.spec.b_law.law(j) {
                ScalarLaw::Pareto { index, .. } => Some(*index),
                _ => Some(f64::INFINITY),
            },
        }
    }

    /// `B` is identically zero (the fixed point is then `X ≡ 0`).
    pub fn b_is_zero(&self) -> bool {
        match &self.kernel {
            Kernel::Table { atoms, .. } => atoms.iter().all(|a| a.weight == 0.0 || a.b.iter().all(|&x| x == 0.0)),
            Kernel::Sampler(_) => false,
            _ => self.spec.b_law.laws.iter().all(ScalarLaw::is_zero),
        }
    }
}

fn factor_or_identity(correlation: &Option<Vec<f64>>, d: usize) -> Result<Vec<f64>> {
    match correlation {
        Some(c) => psd_factor(c, d),
        None => {
            let mut id = vec![0.0; d * d];
            for i in 0..d {
                id[i * d + i] = 1.0;
            }
            Ok(id)
        }
    }
}

/// `E|σN|^s = σ^s 2^{s/2} Γ((s+1)/2) / √π`.
fn normal_abs_moment(sd: f64, s: f64) -> f64 {
    if s == 0.0 {
        return 1.0;
    }
    if sd == 0.0 {
        return 0.0;
    }
    (s * sd.ln() + 0.5 * s * std::f64::consts::LN_2 + ln_gamma(0.5 * (s + 1.0)) - 0.5 * std::f64::consts::PI.ln()).exp()
}

fn table_expect(atoms: &[Atom], f: impl Fn(&Atom) -> f64) -> f64 {
    let total: f64 = atoms.iter().map(|a| a.weight).sum();
    atoms.iter().filter(|a| a.weight > 0.0).map(|a| a.weight * f(a)).sum::<f64>() / total
}

/// One draw of the coefficient pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Per-worker sampling state with scratch buffers.
pub struct CoeffSampler<'m> {
    model: &'m Model,
    normals: Vec<f64>,
}

impl CoeffSampler<'_> {
    pub fn draw(&mut self, rng: &mut StreamRng, a: &mut [f64], b: &mut [f64]) {
        let d = self.model.dim();
        match &self.model.kernel {
            Kernel::TwoPoint { p, up, down, coupling } => match coupling {
                Coupling::Independent => {
                    for j in 0..d {
                        let u: f64 = rng.random();
                        a[j] = if u < p[j] { up[j] } else { down[j] };
                    }
                }
                Coupling::Comonotone => {
                    let u: f64 = rng.random();
                    for j in 0..d {
                        a[j] = if u < p[j] { up[j] } else { down[j] };
                    }
                }
            },
            Kernel::LogNormal { mu, sigma, factor } => {
                self.correlated(rng, factor);
                for j in 0..d {
                    a[j] = (mu[j] + sigma[j] * self.normals[j]).exp();
                }
            }
            Kernel::CccGarch { a: ga, b: gb, factor } => {
                self.correlated(rng, factor);
                for j in 0..d {
                    let z = self.normals[j];
                    a[j] = ga[j] * z * z + gb[j];
                }
            }
            Kernel::Bekk { loadings, .. } => {
                a.iter_mut().for_each(|x| *x = 0.0);
                for row in loadings {
                    let m: f64 = StandardNormal.sample(rng);
                    for j in 0..d {
                        a[j] += m * row[j];
                    }
                }
            }
            Kernel::Table { cumulative, atoms } => {
                let u: f64 = rng.random();
                let k = cumulative.partition_point(|&c| c <= u).min(atoms.len() - 1);
                a.copy_from_slice(&atoms[k].a);
                b.copy_from_slice(&atoms[k].b);
                return;
            }
            Kernel::Sampler(law) => {
                law.sample(rng, a, b);
                return;
            }
        }
        let bspec = &self.model.spec.b_law;
        match bspec.coupling {
            Coupling::Independent => {
                for (j, bj) in b.iter_mut().enumerate().take(d) {
                    let law = bspec.law(j);
                    *bj = match law {
                        ScalarLaw::Constant { value } => *value,
                        _ => law.quantile(Open01.sample(rng)),
                    };
                }
            }
            Coupling::Comonotone => {
                let u: f64 = Open01.sample(rng);
                for (j, bj) in b.iter_mut().enumerate().take(d) {
                    *bj = bspec.law(j).quantile(u);
                }
            }
        }
    }

    fn correlated(&mut self, rng: &mut StreamRng, factor: &[f64]) {
        let d = self.model.dim();
        let mut raw = [0.0f64; 16];
        let mut heap;
        let raw: &mut [f64] = if d <= 16 {
            &mut raw[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for r in raw.iter_mut() {
            *r = StandardNormal.sample(rng);
        }
        for i in 0..d {
            let row = &factor[i * d..i * d + i + 1];
            self.normals[i] = row.iter().zip(raw.iter()).map(|(l, z)| l * z).sum();
        }
    }
}

/// A fixed Monte Carlo sample of `(A, B)`, stored column-major.
///
/// Moment estimators evaluate on a batch so that `s ↦ κ̂_j(s)` is a
/// deterministic smooth function (common random numbers).
#[derive(Debug, Clone)]
pub struct CoeffBatch {
    n: usize,
    d: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl CoeffBatch {
    pub fn draw(model: &Model, n: usize, seq: &SeedSequence) -> Self {
        let d = model.dim();
        let parts = parallel::map_chunks(n, CHUNK, |c, range| {
            let mut rng = seq.stream(c as u64);
            let mut sampler = model.sampler();
            let len = range.len();
            let mut a = vec![0.0; len * d];
            let mut b = vec![0.0; len * d];
            for k in 0..len {
                sampler.draw(&mut rng, &mut a[k * d..(k + 1) * d], &mut b[k * d..(k + 1) * d]);
            }
            (a, b)
        });
        let mut batch = Self { n, d, a: vec![0.0; n * d], b: vec![0.0; n * d] };
        let mut offset = 0;
        for (a, b) in parts {
            let len = a.len() / d;
            for k in 0..len {
                for j in 0..d {
                    batch.a[j * n + offset + k] = a[k * d + j];
                    batch.b[j * n + offset + k] = b[k * d + j];
                }
            }
            offset += len;
        }
        batch
    }

    pub fn from_columns(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        let d = a.len();
        let n = a.first().map_or(0, Vec::len);
        if d == 0 || b.len() != d || a.iter().chain(b.iter()).any(|c| c.len() != n) {
            return Err(Error::config("ragged coefficient columns"));
        }
        Ok(Self { n, d, a: a.concat(), b: b.concat() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn a(&self, j: usize) -> &[f64] {
        &self.a[j * self.n..(j + 1) * self.n]
    }

    pub fn b(&self, j: usize) -> &[f64] {
        &self.b[j * self.n..(j + 1) * self.n]
    }

    /// The same draws in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        for j in 0..self.d {
            for (k, &src) in order.iter().enumerate() {
                out.a[j * self.n + k] = self.a[j * self.n + src];
                out.b[j * self.n + k] = self.b[j * self.n + src];
            }
        }
        out
    }
}

/// Summary of `log|A_j|` on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMoment {
    /// Mean of `log|A_j|` over draws with `A_j ≠ 0`.
    pub conditional: Estimate,
    /// Fraction of draws with `A_j = 0`.
    pub zero_mass: f64,
    /// `E log|A_j| < 0` with confidence (always true with mass at zero).
    pub contractive: bool,
    /// `|A_j|` never varied across nonzero draws; its logarithm is then
    /// arithmetic and the renewal-theoretic tail asymptotics do not apply.
    pub constant_modulus: bool,
}

impl LogMoment {
    /// Unconditional `E log|A_j|`; `-∞` with positive mass at zero.
    pub fn mean(&self) -> f64 {
        if self.zero_mass > 0.0 {
            f64::NEG_INFINITY
        } else {
            self.conditional.value
        }
    }
}

pub fn log_moment_on(batch: &CoeffBatch, j: usize) -> LogMoment {
    let a = batch.a(j);
    let zeros = parallel::count(a.len(), |k| a[k] == 0.0);
    let parts = parallel::map_chunks(a.len(), CHUNK, |_, range| {
        let mut acc = RunningMoments::default();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in range {
            let m = a[k].abs();
            if m > 0.0 {
                acc.push(m.ln());
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
        (acc, lo, hi)
    });
    let mut acc = RunningMoments::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, l, h) in &parts {
        acc.merge(p);
        lo = lo.min(*l);
        hi = hi.max(*h);
    }
    let conditional = Estimate::from_moments(&acc);
    let zero_mass = zeros as f64 / a.len().max(1) as f64;
    LogMoment {
        conditional,
        zero_mass,
        contractive: zeros > 0 || conditional.ci_hi < 0.0,
        constant_modulus: acc.count > 0 && lo == hi,
    }
}

/// Monte Carlo estimate of `E log|A_j|` from `n` fresh draws.
pub fn log_moment(model: &Model, j: usize, n: usize, seq: &SeedSequence) -> Result<LogMoment> {
    model.check_coord(j)?;
    if n == 0 {
        return Err(Error::config("log_moment needs n >= 1"));
    }
    let batch = CoeffBatch::draw(model, n, &seq.derive("log-moment"));
    Ok(log_moment_on(&batch, j))
}

/// Evidence that every coordinate satisfies `E log|A_j| < 0`; required
/// before a stationary pool can be simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractivityCertificate {
    pub fingerprint: String,
    pub log_moments: Vec<LogMoment>,
}

impl ContractivityCertificate {
    pub fn issue(model: &Model, batch: &CoeffBatch) -> Result<Self> {
        let log_moments: Vec<LogMoment> = (0..model.dim()).map(|j| log_moment_on(batch, j)).collect();
        for (j, lm) in log_moments.iter().enumerate() {
            if !lm.contractive {
                return Err(Error::NotContractive { coord: j, upper: lm.conditional.ci_hi });
            }
        }
        Ok(Self { fingerprint: model.spec().fingerprint(), log_moments })
    }

    /// `ceil(20 / |median_j E log|A_j||)`.
    pub fn default_burn_in(&self) -> usize {
        let mut means: Vec<f64> = self.log_moments.iter().map(LogMoment::mean).collect();
        means.sort_by(f64::total_cmp);
        let n = means.len();
        let median = if n % 2 == 1 { means[n / 2] } else { 0.5 * (means[n / 2 - 1] + means[n / 2]) };
        if !median.is_finite() {
            return 1;
        }
        (20.0 / median.abs()).ceil().clamp(1.0, 1e7) as usize
    }
}
