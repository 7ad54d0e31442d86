//! Orthonormal polynomial chaos bases in the random variable `z`.
//!
//! Two families are supported: Legendre polynomials for `z ~ U[-1, 1]` and
//! probabilists' Hermite polynomials for `z ~ N(0, 1)`. Both are normalized so
//! that `∫ ψ_j ψ_l π(z) dz = δ_jl` and use zero-based degrees `0..K`.
//!
//! Every `z`-integral in the crate goes through [`gauss_rule`]. Nodes are seeded
//! from the eigenvalues of the symmetric Jacobi matrix (Golub-Welsch) and then
//! polished by Newton iteration on the three-term recurrence; weights come from
//! the Christoffel function `w_i = 1 / Σ_n ψ_n(z_i)²`, which stays accurate far
//! into the Hermite tails where eigenvector components underflow.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NEWTON_MAX_ITER: usize = 100;

/// Probability density of the scalar random input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolynomialFamily {
    /// `z ∈ [-1, 1]`, `π(z) = 1/2`.
    #[serde(alias = "legendre")]
    LegendreUniform,
    /// `z ∈ ℝ`, `π(z)` the standard normal density.
    #[serde(alias = "hermite")]
    HermiteGaussian,
}

impl PolynomialFamily {
    /// Parses the short names used on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "legendre" | "legendre_uniform" | "uniform" => Ok(Self::LegendreUniform),
            "hermite" | "hermite_gaussian" | "gaussian" | "normal" => Ok(Self::HermiteGaussian),
            other => Err(Error::InvalidArgument(format!(
                "unsupported polynomial family '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LegendreUniform => "legendre",
            Self::HermiteGaussian => "hermite",
        }
    }

    /// Closed interval containing the support, `None` for unbounded ends.
    pub fn support(&self) -> (Option<f64>, Option<f64>) {
        match self {
            Self::LegendreUniform => (Some(-1.0), Some(1.0)),
            Self::HermiteGaussian => (None, None),
        }
    }

    /// Coefficients `(a_n, b_n)` of the orthonormal recurrence
    /// `z ψ_n = b_{n+1} ψ_{n+1} + a_n ψ_n + b_n ψ_{n-1}`; `b_0` is unused and set to zero.
    pub fn recurrence(&self, n: usize) -> (f64, f64) {
        if n == 0 {
            return (0.0, 0.0);
        }
        let nf = n as f64;
        match self {
            Self::LegendreUniform => (0.0, nf / (4.0 * nf * nf - 1.0).sqrt()),
            Self::HermiteGaussian => (0.0, nf.sqrt()),
        }
    }

    /// `∫ z^p π(z) dz`.
    pub fn moment(&self, p: u32) -> f64 {
        if p % 2 == 1 {
            return 0.0;
        }
        match self {
            Self::LegendreUniform => 1.0 / (p as f64 + 1.0),
            Self::HermiteGaussian => double_factorial(p.saturating_sub(1)),
        }
    }
}

/// `n!!` as a float, with `0!! = 1`.
pub fn double_factorial(n: u32) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// Nodes and positive weights of a Gauss rule against a probability density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Evaluates orthonormal `ψ_0(z), …, ψ_{n-1}(z)` by the recurrence.
fn orthonormal_values(family: PolynomialFamily, n: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(1.0);
    let mut prev = 0.0;
    let mut cur = 1.0;
    for m in 0..n.saturating_sub(1) {
        let (a, b) = family.recurrence(m);
        let (_, b_next) = family.recurrence(m + 1);
        let next = ((z - a) * cur - b * prev) / b_next;
        out.push(next);
        prev = cur;
        cur = next;
    }
    out
}

/// Values and first derivatives of orthonormal `ψ_0..ψ_{n-1}` at `z`.
fn orthonormal_values_and_derivatives(
    family: PolynomialFamily,
    n: usize,
    z: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(n);
    let mut dp = Vec::with_capacity(n);
    if n == 0 {
        return (p, dp);
    }
    p.push(1.0);
    dp.push(0.0);
    for m in 0..n - 1 {
        let (a, b) = family.recurrence(m);
        let (_, b_next) = family.recurrence(m + 1);
        let (pm1, dpm1) = if m == 0 { (0.0, 0.0) } else { (p[m - 1], dp[m - 1]) };
        p.push(((z - a) * p[m] - b * pm1) / b_next);
        dp.push(((z - a) * dp[m] + p[m] - b * dpm1) / b_next);
    }
    (p, dp)
}

/// Gauss rule with `order` nodes for the density of `family`.
///
/// Exact for polynomials of degree `≤ 2·order − 1`.
pub fn gauss_rule(family: PolynomialFamily, order: usize) -> Result<QuadratureRule> {
    if order == 0 {
        return Err(Error::InvalidArgument(
            "quadrature order must be at least 1".into(),
        ));
    }
    if order == 1 {
        return Ok(QuadratureRule {
            nodes: vec![family.recurrence(0).0],
            weights: vec![1.0],
        });
    }

    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for n in 0..order {
        let (a, _) = family.recurrence(n);
        jacobi[(n, n)] = a;
        if n + 1 < order {
            let (_, b) = family.recurrence(n + 1);
            jacobi[(n, n + 1)] = b;
            jacobi[(n + 1, n)] = b;
        }
    }
    let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    // Newton polish on p_order, the orthonormal polynomial whose roots are the nodes.
    for (index, z) in nodes.iter_mut().enumerate() {
        let mut converged = false;
        let mut last_step = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITER {
            let (p, dp) = orthonormal_values_and_derivatives(family, order + 1, *z);
            let step = p[order] / dp[order];
            if !step.is_finite() {
                break;
            }
            *z -= step;
            last_step = step.abs();
            if last_step <= 4.0 * f64::EPSILON * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged && !(last_step <= 1e-12 * z.abs().max(1.0)) {
            return Err(Error::NoConvergence { order, index });
        }
    }

    // Both supported densities are even: enforce exact mirror symmetry.
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let half = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -half;
        nodes[j] = half;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&z| {
            let psi = orthonormal_values(family, order, z);
            1.0 / psi.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }

    Ok(QuadratureRule { nodes, weights })
}

/// Orthonormal basis of degrees `0..k` together with its quadrature rule.
#[derive(Debug, Clone)]
pub struct GpcBasis {
    family: PolynomialFamily,
    k: usize,
    recurrence: Vec<(f64, f64)>,
    quad: QuadratureRule,
    /// `values[j][q] = ψ_j(z_q)` at the quadrature nodes.
    values: Vec<Vec<f64>>,
}

/// Default quadrature order for a basis of `k` functions.
pub fn default_quad_order(k: usize) -> usize {
    (2 * k).max(20)
}

impl GpcBasis {
    pub fn new(family: PolynomialFamily, k: usize, quad_order: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("basis size K must be at least 1".into()));
        }
        if quad_order < k {
            return Err(Error::QuadOrderTooSmall { k, quad_order });
        }
        let quad = gauss_rule(family, quad_order)?;
        let recurrence = (0..=k).map(|n| family.recurrence(n)).collect();
        let mut values = vec![Vec::with_capacity(quad.len()); k];
        for &z in &quad.nodes {
            for (j, v) in orthonormal_values(family, k, z).into_iter().enumerate() {
                values[j].push(v);
            }
        }
        Ok(Self {
            family,
            k,
            recurrence,
            quad,
            values,
        })
    }

    pub fn with_default_quadrature(family: PolynomialFamily, k: usize) -> Result<Self> {
        Self::new(family, k, default_quad_order(k))
    }

    pub fn family(&self) -> PolynomialFamily {
        self.family
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quad
    }

    pub fn recurrence_coefficients(&self) -> &[(f64, f64)] {
        &self.recurrence
    }

    /// `ψ_j(z_q)` at the basis' own quadrature nodes.
    pub fn node_values(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    /// `[ψ_0(z), …, ψ_{K−1}(z)]`.
    pub fn eval(&self, z: f64) -> Vec<f64> {
        orthonormal_values(self.family, self.k, z)
    }

    /// `Σ_j c_j ψ_j(z)`.
    pub fn reconstruct(&self, coeffs: &[f64], z: f64) -> f64 {
        self.eval(z).iter().zip(coeffs).map(|(p, c)| p * c).sum()
    }

    /// Coefficients `Σ_q w_q f(z_q) ψ_j(z_q)` from samples at the quadrature nodes.
    pub fn project_values(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != self.quad.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples at the quadrature nodes, got {}",
                self.quad.len(),
                samples.len()
            )));
        }
        Ok((0..self.k)
            .map(|j| {
                self.values[j]
                    .iter()
                    .zip(&self.quad.weights)
                    .zip(samples)
                    .map(|((p, w), f)| w * f * p)
                    .sum()
            })
            .collect())
    }

    pub fn project<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        let samples: Vec<f64> = self.quad.nodes.iter().map(|&z| f(z)).collect();
        self.project_values(&samples)
            .expect("sample count matches the quadrature rule")
    }

    /// Galerkin matrix `∫ g(z) ψ_j ψ_l π dz` through the basis quadrature.
    pub fn galerkin_matrix<F: Fn(f64) -> f64>(&self, g: F) -> DMatrix<f64> {
        let gz: Vec<f64> = self.quad.nodes.iter().map(|&z| g(z)).collect();
        self.galerkin_matrix_from_values(&gz)
    }

    /// Galerkin matrix from samples of `g` at the quadrature nodes.
    pub fn galerkin_matrix_from_values(&self, gz: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        let mut m = DMatrix::zeros(k, k);
        for j in 0..k {
            for l in j..k {
                let s: f64 = (0..self.quad.len())
                    .map(|q| self.quad.weights[q] * gz[q] * self.values[j][q] * self.values[l][q])
                    .sum();
                m[(j, l)] = s;
                m[(l, j)] = s;
            }
        }
        m
    }

    /// `∫ ψ_j ψ_l π dz`; the identity up to quadrature roundoff.
    pub fn gram(&self) -> DMatrix<f64> {
        self.galerkin_matrix(|_| 1.0)
    }

    /// `M^z_{jl} = ∫ z ψ_j ψ_l π dz`.
    pub fn multiply_by_z(&self) -> DMatrix<f64> {
        self.galerkin_matrix(|z| z)
    }

    /// Matrix `D` with `D[j, l]` the coefficient of `ψ_j` in `ψ_l'`.
    ///
    /// Maps coefficients of `p(z)` to coefficients of `p'(z)`; nonzero only for `j < l`.
    pub fn z_derivative_matrix(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut d = DMatrix::zeros(k, k);
        for (q, (&z, &w)) in self.quad.nodes.iter().zip(&self.quad.weights).enumerate() {
            let (_, dp) = orthonormal_values_and_derivatives(self.family, k, z);
            for l in 1..k {
                for j in 0..l {
                    d[(j, l)] += w * dp[l] * self.values[j][q];
                }
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn legendre_low_degree_functions() {
        let b = GpcBasis::new(PolynomialFamily::LegendreUniform, 3, 8).unwrap();
        for &z in &[-0.9, -0.2, 0.0, 0.4, 1.0] {
            let p = b.eval(z);
            assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(p[1], 3f64.sqrt() * z, epsilon = 1e-14);
            assert_abs_diff_eq!(p[2], 5f64.sqrt() * (3.0 * z * z - 1.0) / 2.0, epsilon = 1e-14);
        }
        let one = GpcBasis::new(PolynomialFamily::LegendreUniform, 1, 4).unwrap();
        assert_eq!(one.eval(0.37), vec![1.0]);
    }

    #[test]
    fn hermite_second_function_vanishes_at_one() {
        let b = GpcBasis::new(PolynomialFamily::HermiteGaussian, 3, 8).unwrap();
        assert_abs_diff_eq!(b.eval(1.0)[2], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.eval(2.0)[2], 3.0 / 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn small_rules_in_closed_form() {
        let h = gauss_rule(PolynomialFamily::HermiteGaussian, 3).unwrap();
        let s3 = 3f64.sqrt();
        for (n, e) in h.nodes.iter().zip([-s3, 0.0, s3]) {
            assert_abs_diff_eq!(*n, e, epsilon = 1e-14);
        }
        for (w, e) in h.weights.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert_abs_diff_eq!(*w, e, epsilon = 1e-14);
        }
        let l1 = gauss_rule(PolynomialFamily::LegendreUniform, 1).unwrap();
        assert_eq!(l1.nodes, vec![0.0]);
        assert_eq!(l1.weights, vec![1.0]);
        let l5 = gauss_rule(PolynomialFamily::LegendreUniform, 5).unwrap();
        assert_abs_diff_eq!(l5.integrate(|z| z.powi(4)), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(matches!(
            GpcBasis::new(PolynomialFamily::LegendreUniform, 5, 4),
            Err(Error::QuadOrderTooSmall { .. })
        ));
        assert!(GpcBasis::new(PolynomialFamily::LegendreUniform, 0, 4).is_err());
        assert!(gauss_rule(PolynomialFamily::HermiteGaussian, 0).is_err());
        assert!(PolynomialFamily::from_name("laguerre").is_err());
    }

    #[test]
    fn mass_and_support() {
        for family in [PolynomialFamily::LegendreUniform, PolynomialFamily::HermiteGaussian] {
            for q in [1, 2, 7, 20, 40] {
                let r = gauss_rule(family, q).unwrap();
                assert_abs_diff_eq!(r.total_mass(), 1.0, epsilon = 1e-13);
                assert!(r.weights.iter().all(|&w| w > 0.0));
                if family == PolynomialFamily::LegendreUniform {
                    assert!(r.nodes.iter().all(|z| z.abs() < 1.0));
                }
            }
        }
    }

    #[test]
    fn orthonormal_up_to_twenty() {
        for family in [PolynomialFamily::LegendreUniform, PolynomialFamily::HermiteGaussian] {
            for k in [1, 5, 12, 20] {
                let b = GpcBasis::with_default_quadrature(family, k).unwrap();
                let err = (b.gram() - DMatrix::<f64>::identity(k, k)).amax();
                assert!(err <= 1e-12, "{family:?} K={k}: {err:e}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let b = GpcBasis::new(PolynomialFamily::LegendreUniform, 3, 8).unwrap();
        let c = b.project(|z| 1.0 + 0.5 * z);
        assert_abs_diff_eq!(c[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[1], 0.5 / 3f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(c[2], 0.0, epsilon = 1e-14);
        let c = b.project(|z| 5f64.sqrt() * (3.0 * z * z - 1.0) / 2.0);
        assert_abs_diff_eq!(c[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[2], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_of_rational_function_matches_fine_rule() {
        let f = |z: f64| 1.0 / (1.0 + 0.5 * z);
        let coarse = GpcBasis::new(PolynomialFamily::LegendreUniform, 6, 40).unwrap();
        let fine = GpcBasis::new(PolynomialFamily::LegendreUniform, 6, 200).unwrap();
        let a = coarse.project(f);
        let b = fine.project(f);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn multiply_by_z_entries() {
        let l = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 6).unwrap();
        let mz = l.multiply_by_z();
        assert_abs_diff_eq!(mz[(0, 1)], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(mz[(0, 0)], 0.0, epsilon = 1e-15);
        let h = GpcBasis::with_default_quadrature(PolynomialFamily::HermiteGaussian, 6).unwrap();
        assert_abs_diff_eq!(h.multiply_by_z()[(0, 1)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn multiply_by_z_is_the_jacobi_matrix() {
        for family in [PolynomialFamily::LegendreUniform, PolynomialFamily::HermiteGaussian] {
            let b = GpcBasis::with_default_quadrature(family, 20).unwrap();
            let mz = b.multiply_by_z();
            for j in 0..20 {
                for l in 0..20 {
                    let expected = if l == j + 1 {
                        family.recurrence(l).1
                    } else if j == l + 1 {
                        family.recurrence(j).1
                    } else {
                        0.0
                    };
                    let tol = if j.abs_diff(l) >= 2 { 1e-14 } else { 1e-13 };
                    assert!(
                        (mz[(j, l)] - expected).abs() <= tol * expected.abs().max(1.0),
                        "{family:?} ({j},{l}) {} vs {expected}",
                        mz[(j, l)]
                    );
                }
            }
        }
    }

    #[test]
    fn derivative_matrix_examples() {
        let b = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 5).unwrap();
        let d = b.z_derivative_matrix();
        assert_abs_diff_eq!(d[(0, 1)], 3f64.sqrt(), epsilon = 1e-13);
        for j in 0..5 {
            assert_eq!(d[(j, 0)], 0.0);
            for l in 0..=j {
                assert_eq!(d[(j, l)], 0.0);
            }
        }
        // d²/dz² z² = 2.
        let z2 = nalgebra::DVector::from_vec(b.project(|z| z * z));
        let second = &d * (&d * z2);
        let two = b.project(|_| 2.0);
        for (x, y) in second.iter().zip(&two) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn hermite_derivative_is_a_shift() {
        // ψ_n' = √n ψ_{n−1} for orthonormal probabilists' Hermite.
        let b = GpcBasis::with_default_quadrature(PolynomialFamily::HermiteGaussian, 8).unwrap();
        let d = b.z_derivative_matrix();
        for l in 1..8 {
            for j in 0..l {
                let expected = if j + 1 == l { (l as f64).sqrt() } else { 0.0 };
                assert_abs_diff_eq!(d[(j, l)], expected, epsilon = 1e-12);
            }
        }
    }
}
