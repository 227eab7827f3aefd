//! The anisotropic quasi-norm `|x|_α = max_j |x_j|^{α_j}`, the dilations
//! `δ_t x = (t^{1/α_1} x_1, ..., t^{1/α_d} x_d)` and polar coordinates
//! `x ↦ (|x|_α, δ_{1/|x|_α} x)` on the unit α-sphere.

use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaNorm {
    alphas: Vec<f64>,
    c_alpha: f64,
    /// Per-coordinate magnitude above which `|x_j|^{α_j}` is taken in log space.
    #[serde(skip)]
    guard: Vec<f64>,
}

/// `max_j max(1, 2^{α_j - 1})`, valid because
/// `(a + b)^α ≤ max(1, 2^{α-1}) (a^α + b^α)` for `a, b ≥ 0`.
pub fn subadditivity_constant(alphas: &[f64]) -> f64 {
    alphas.iter().map(|&a| (a - 1.0).exp2().max(1.0)).fold(1.0, f64::max)
}

impl AlphaNorm {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Domain(format!("tail indices must be positive and finite: {alphas:?}")));
        }
        let c_alpha = subadditivity_constant(&alphas);
        let guard = alphas.iter().map(|&a| 10f64.powf(200.0 / a)).collect();
        Ok(Self { alphas, c_alpha, guard })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn dim(&self) -> usize {
        self.alphas.len()
    }

    pub fn c_alpha(&self) -> f64 {
        self.c_alpha
    }

    /// Restriction to a subset of coordinates.
    pub fn restrict(&self, coords: &[usize]) -> Self {
        AlphaNorm::new(coords.iter().map(|&j| self.alphas[j]).collect()).expect("restriction of a valid norm")
    }

    #[inline]
    fn coord_power(&self, j: usize, x: f64) -> f64 {
        let m = x.abs();
        if m > self.guard[j] {
            (self.alphas[j] * m.ln()).exp()
        } else {
            m.powf(self.alphas[j])
        }
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        x.iter().enumerate().map(|(j, &v)| self.coord_power(j, v)).fold(0.0, f64::max)
    }

    /// `log |x|_α`, finite even when `|x|_α` itself would overflow.
    pub fn log_norm(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.alphas)
            .map(|(&v, &a)| a * v.abs().ln())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Norm of the sub-vector on `coords` (0 for an empty set).
    pub fn norm_on(&self, x: &[f64], coords: &[usize]) -> f64 {
        coords.iter().map(|&j| self.coord_power(j, x[j])).fold(0.0, f64::max)
    }

    pub fn dilate(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.dilate_in_place(t, &mut out);
        out
    }

    pub fn dilate_in_place(&self, t: f64, x: &mut [f64]) {
        debug_assert!(t > 0.0);
        let lt = t.ln();
        for (v, &a) in x.iter_mut().zip(&self.alphas) {
            *v *= (lt / a).exp();
        }
    }

    /// `(|x|_α, δ_{1/|x|_α} x)`.
    pub fn polar(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.iter().all(|&v| v == 0.0) {
            return Err(Error::Domain("polar coordinates of the origin".into()));
        }
        let log_s = self.log_norm(x);
        let mut omega = x.to_vec();
        for (v, &a) in omega.iter_mut().zip(&self.alphas) {
            *v *= (-log_s / a).exp();
        }
        Ok((log_s.exp(), omega))
    }

    pub fn unpolar(&self, s: f64, omega: &[f64]) -> Vec<f64> {
        self.dilate(s, omega)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(a: &[f64]) -> AlphaNorm {
        AlphaNorm::new(a.to_vec()).unwrap()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&[1.0, 2.0]).norm(&[3.0, 2.0]), 4.0);
        assert_eq!(norm(&[1.0, 2.0]).norm(&[0.0, 0.0]), 0.0);
        assert_eq!(norm(&[2.0]).norm(&[-3.0]), 9.0);
    }

    #[test]
    fn dilation_examples() {
        let n = norm(&[1.0, 2.0]);
        assert_eq!(n.dilate(1.0, &[3.0, 2.0]), vec![3.0, 2.0]);
        let d = n.dilate(4.0, &[3.0, 2.0]);
        assert!((d[0] - 12.0).abs() < 1e-13 && (d[1] - 4.0).abs() < 1e-13);
        let g = n.dilate(2.0, &n.dilate(2.0, &[1.0, 1.0]));
        assert!((g[0] - 4.0).abs() < 1e-13 && (g[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn polar_examples() {
        let n = norm(&[1.0, 2.0]);
        let (s, w) = n.polar(&[12.0, 4.0]).unwrap();
        assert!((s - 16.0).abs() < 1e-12);
        assert!((w[0] - 0.75).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);
        let (s, w) = n.polar(&[1.0, 0.5]).unwrap();
        assert_eq!((s, w), (1.0, vec![1.0, 0.5]));
        let (s, w) = norm(&[2.0]).polar(&[5.0]).unwrap();
        assert!((s - 25.0).abs() < 1e-12 && (w[0] - 1.0).abs() < 1e-14);
        assert!(matches!(n.polar(&[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn subadditivity_constant_examples() {
        assert_eq!(subadditivity_constant(&[0.5, 1.0]), 1.0);
        assert_eq!(subadditivity_constant(&[1.0, 2.0]), 2.0);
        assert_eq!(subadditivity_constant(&[3.0]), 4.0);
    }

    #[test]
    fn overflow_guard_uses_log_space() {
        let n = norm(&[3.0]);
        // 1e80^3 = 1e240 is representable; powf and the guarded path agree.
        let v = n.norm(&[1e80]);
        assert!((v / 1e240 - 1.0).abs() < 1e-12);
        assert!((n.log_norm(&[1e200]) - 600.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn restricted_norm_is_max_over_subset() {
        let n = norm(&[1.0, 2.0, 0.5]);
        let x = [3.0, -2.0, 16.0];
        let sub = n.restrict(&[0, 2]);
        assert_eq!(sub.norm(&[3.0, 16.0]), n.norm_on(&x, &[0, 2]));
        assert_eq!(n.norm(&[3.0, 0.0, 16.0]), n.norm_on(&x, &[0, 2]));
    }
}
