//! Random anisotropic scattering kernels and their discrete collision operators.
//!
//! In h-representation the collision operator reads
//! `(A h)_i = Σ_j ω_j σ(v_i, v_j, z) (h_j − h_i)`. Its quadratic form is
//! `⟨A h, h⟩_ω = −½ Σ_ij ω_i ω_j σ_ij (h_i − h_j)²`, which gives discrete
//! coercivity `⟨A h, h⟩_ω ≤ −σ_min ‖h − Πh‖²_ω` without approximation.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpc_basis::{GpcBasis, PolynomialFamily};
use crate::velocity_quadrature::VelocityGrid;

/// Parametric form of `σ(v, w, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `σ = σ₀`.
    Constant { sigma0: f64 },
    /// `σ = σ₀ + a·z`.
    AffineZ { sigma0: f64, a: f64 },
    /// `σ = σ₀ + a·z + b·(1 + c·z)·exp(−(v − w)²/2)`.
    AnisotropicGaussian { sigma0: f64, a: f64, b: f64, c: f64 },
    /// `σ = σ₀ + s·sin(πz)·exp(−(v² + w²)/4)`.
    NonlinearZ { sigma0: f64, s: f64 },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::AffineZ { .. } => "affine_z",
            Self::AnisotropicGaussian { .. } => "anisotropic_gaussian",
            Self::NonlinearZ { .. } => "nonlinear_z",
        }
    }

    /// Builds a family from its name and positional parameters.
    pub fn from_params(name: &str, params: &[f64]) -> Result<Self> {
        let expect = |n: usize| -> Result<()> {
            if params.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "kernel family '{name}' takes {n} parameters, got {}",
                    params.len()
                )))
            }
        };
        match name {
            "constant" => {
                expect(1)?;
                Ok(Self::Constant { sigma0: params[0] })
            }
            "affine_z" => {
                expect(2)?;
                Ok(Self::AffineZ {
                    sigma0: params[0],
                    a: params[1],
                })
            }
            "anisotropic_gaussian" => {
                expect(4)?;
                Ok(Self::AnisotropicGaussian {
                    sigma0: params[0],
                    a: params[1],
                    b: params[2],
                    c: params[3],
                })
            }
            "nonlinear_z" => {
                expect(2)?;
                Ok(Self::NonlinearZ {
                    sigma0: params[0],
                    s: params[1],
                })
            }
            other => Err(Error::Config(format!("unknown kernel family '{other}'"))),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Self::Constant { sigma0 } => vec![sigma0],
            Self::AffineZ { sigma0, a } => vec![sigma0, a],
            Self::AnisotropicGaussian { sigma0, a, b, c } => vec![sigma0, a, b, c],
            Self::NonlinearZ { sigma0, s } => vec![sigma0, s],
        }
    }

    /// `∂_z^j σ(v, w, z)`, analytic per family.
    pub fn z_derivative(&self, j: u32, v: f64, w: f64, z: f64) -> f64 {
        match *self {
            Self::Constant { sigma0 } => {
                if j == 0 {
                    sigma0
                } else {
                    0.0
                }
            }
            Self::AffineZ { sigma0, a } => match j {
                0 => sigma0 + a * z,
                1 => a,
                _ => 0.0,
            },
            Self::AnisotropicGaussian { sigma0, a, b, c } => {
                let e = (-(v - w) * (v - w) / 2.0).exp();
                match j {
                    0 => sigma0 + a * z + b * (1.0 + c * z) * e,
                    1 => a + b * c * e,
                    _ => 0.0,
                }
            }
            Self::NonlinearZ { sigma0, s } => {
                let g = (-(v * v + w * w) / 4.0).exp();
                let osc = s * PI.powi(j as i32) * (PI * z + j as f64 * PI / 2.0).sin() * g;
                if j == 0 {
                    sigma0 + osc
                } else {
                    osc
                }
            }
        }
    }

    pub fn eval(&self, v: f64, w: f64, z: f64) -> f64 {
        self.z_derivative(0, v, w, z)
    }

    /// True when `σ` does not depend on the velocities.
    pub fn is_velocity_independent(&self) -> bool {
        match *self {
            Self::Constant { .. } | Self::AffineZ { .. } => true,
            Self::AnisotropicGaussian { b, .. } => b == 0.0,
            Self::NonlinearZ { s, .. } => s == 0.0,
        }
    }

    /// True when `σ` does not depend on `z`.
    pub fn is_z_independent(&self) -> bool {
        match *self {
            Self::Constant { .. } => true,
            Self::AffineZ { a, .. } => a == 0.0,
            Self::AnisotropicGaussian { a, b, c, .. } => a == 0.0 && (b == 0.0 || c == 0.0),
            Self::NonlinearZ { s, .. } => s == 0.0,
        }
    }
}

/// A kernel together with its declared bounds `σ_min ≤ σ ≤ σ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            family,
            sigma_min,
            sigma_max,
        }
    }

    /// `Constant(σ₀)` with tight bounds.
    pub fn constant(sigma0: f64) -> Self {
        Self::new(KernelFamily::Constant { sigma0 }, sigma0, sigma0)
    }

    pub fn sigma(&self, v: f64, w: f64, z: f64) -> f64 {
        self.family.eval(v, w, z)
    }
}

/// `σ(v, w, z)` for a kernel spec.
pub fn sigma_eval(spec: &KernelSpec, v: f64, w: f64, z: f64) -> f64 {
    spec.sigma(v, w, z)
}

/// Collocation collision operator at a fixed `z`.
#[derive(Debug, Clone)]
pub struct CollisionOperatorColloc {
    pub z: f64,
    /// `σ(v_i, v_j, z)`.
    pub sigma: DMatrix<f64>,
    /// Dense form of `A`.
    pub matrix: DMatrix<f64>,
    weights: Vec<f64>,
}

impl CollisionOperatorColloc {
    pub fn new(spec: &KernelSpec, grid: &VelocityGrid, z: f64) -> Self {
        let nv = grid.len();
        let v = grid.nodes();
        let w = grid.weights();
        let sigma = DMatrix::from_fn(nv, nv, |i, j| spec.sigma(v[i], v[j], z));
        let mut matrix = DMatrix::zeros(nv, nv);
        for i in 0..nv {
            let mut diag = 0.0;
            for j in 0..nv {
                if j != i {
                    let a = w[j] * sigma[(i, j)];
                    matrix[(i, j)] = a;
                    diag += a;
                }
            }
            matrix[(i, i)] = -diag;
        }
        Self {
            z,
            sigma,
            matrix,
            weights: w.to_vec(),
        }
    }

    /// `(A h)_i = Σ_j ω_j σ_ij (h_j − h_i)`; annihilates constants exactly.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let nv = self.weights.len();
        (0..nv)
            .map(|i| {
                (0..nv)
                    .map(|j| self.weights[j] * self.sigma[(i, j)] * (h[j] - h[i]))
                    .sum()
            })
            .collect()
    }

    /// `−½ Σ_ij ω_i ω_j σ_ij (h_i − h_j)²`, the closed form of `⟨A h, h⟩_ω`.
    pub fn quadratic_form(&self, h: &[f64]) -> f64 {
        let nv = self.weights.len();
        let mut acc = 0.0;
        for i in 0..nv {
            for j in 0..nv {
                let d = h[i] - h[j];
                acc += self.weights[i] * self.weights[j] * self.sigma[(i, j)] * d * d;
            }
        }
        -0.5 * acc
    }
}

pub fn collision_matrix_colloc(
    spec: &KernelSpec,
    grid: &VelocityGrid,
    z: f64,
) -> CollisionOperatorColloc {
    CollisionOperatorColloc::new(spec, grid, z)
}

/// Collision frequency `λ_i = Σ_j ω_j σ(v_i, v_j, z)`.
pub fn lambda_eval(spec: &KernelSpec, grid: &VelocityGrid, z: f64) -> Vec<f64> {
    let v = grid.nodes();
    let w = grid.weights();
    v.iter()
        .map(|&vi| v.iter().zip(w).map(|(&vj, &wj)| wj * spec.sigma(vi, vj, z)).sum())
        .collect()
}

/// Galerkin collision operator acting on node-major fields `H[i * K + k]`.
///
/// Stores `B^{(ij)}_{kl} = ∫ σ(v_i, v_j, z) ψ_k ψ_l π dz` for every node pair and the
/// flattened `(Nv·K) × (Nv·K)` matrix used by the implicit solves. A single-mode
/// operator at a fixed `z` (see [`CollisionOperatorSg::at_point`]) is the collocation
/// operator in the same layout.
#[derive(Debug, Clone)]
pub struct CollisionOperatorSg {
    nv: usize,
    k: usize,
    weights: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
    flat: DMatrix<f64>,
}

impl CollisionOperatorSg {
    pub fn new(spec: &KernelSpec, grid: &VelocityGrid, basis: &GpcBasis) -> Self {
        let nv = grid.len();
        let v = grid.nodes();
        let nodes = &basis.quadrature().nodes;
        let mut blocks = vec![DMatrix::zeros(0, 0); nv * nv];
        for i in 0..nv {
            for j in i..nv {
                let gz: Vec<f64> = nodes.iter().map(|&z| spec.sigma(v[i], v[j], z)).collect();
                let b = basis.galerkin_matrix_from_values(&gz);
                blocks[j * nv + i] = b.clone();
                blocks[i * nv + j] = b;
            }
        }
        Self::from_blocks(nv, basis.len(), grid.weights().to_vec(), blocks)
    }

    /// Single-mode operator at a fixed `z`; its flat matrix equals the collocation `A`.
    pub fn at_point(spec: &KernelSpec, grid: &VelocityGrid, z: f64) -> Self {
        let nv = grid.len();
        let v = grid.nodes();
        let mut blocks = Vec::with_capacity(nv * nv);
        for i in 0..nv {
            for j in 0..nv {
                blocks.push(DMatrix::from_element(1, 1, spec.sigma(v[i], v[j], z)));
            }
        }
        Self::from_blocks(nv, 1, grid.weights().to_vec(), blocks)
    }

    fn from_blocks(nv: usize, k: usize, weights: Vec<f64>, blocks: Vec<DMatrix<f64>>) -> Self {
        let n = nv * k;
        let mut flat = DMatrix::zeros(n, n);
        for i in 0..nv {
            let mut diag = DMatrix::<f64>::zeros(k, k);
            for j in 0..nv {
                if j == i {
                    continue;
                }
                let b = &blocks[i * nv + j];
                for kk in 0..k {
                    for l in 0..k {
                        let a = weights[j] * b[(kk, l)];
                        flat[(i * k + kk, j * k + l)] = a;
                        diag[(kk, l)] += a;
                    }
                }
            }
            for kk in 0..k {
                for l in 0..k {
                    flat[(i * k + kk, i * k + l)] = -diag[(kk, l)];
                }
            }
        }
        Self {
            nv,
            k,
            weights,
            blocks,
            flat,
        }
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.nv * self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[i * self.nv + j]
    }

    pub fn flat_matrix(&self) -> &DMatrix<f64> {
        &self.flat
    }

    /// `(Q H)_{i,k} = Σ_j ω_j Σ_l B^{(ij)}_{kl} (H_{j,l} − H_{i,l})`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let (nv, k) = (self.nv, self.k);
        let mut out = vec![0.0; nv * k];
        let mut diff = vec![0.0; k];
        for i in 0..nv {
            for j in 0..nv {
                for l in 0..k {
                    diff[l] = h[j * k + l] - h[i * k + l];
                }
                let b = &self.blocks[i * nv + j];
                for kk in 0..k {
                    let s: f64 = (0..k).map(|l| b[(kk, l)] * diff[l]).sum();
                    out[i * k + kk] += self.weights[j] * s;
                }
            }
        }
        out
    }

    /// `Σ_{i,k} ω_i H_{i,k} (Q H)_{i,k}`.
    pub fn energy(&self, h: &[f64]) -> f64 {
        let qh = self.apply(h);
        let k = self.k;
        (0..self.nv)
            .map(|i| {
                self.weights[i] * (0..k).map(|m| h[i * k + m] * qh[i * k + m]).sum::<f64>()
            })
            .sum()
    }

    /// Flattened ω-orthogonal projector onto the null space (`Π` per mode).
    pub fn null_projector(&self) -> DMatrix<f64> {
        let n = self.dim();
        let k = self.k;
        let mut p = DMatrix::zeros(n, n);
        for i in 0..self.nv {
            for j in 0..self.nv {
                for m in 0..k {
                    p[(i * k + m, j * k + m)] = self.weights[j];
                }
            }
        }
        p
    }

    /// Eigenvalues of the flat operator, real because `W·Q` is symmetric
    /// for `W = diag(ω) ⊗ I`; computed from `W^{1/2} Q W^{-1/2}`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim();
        let k = self.k;
        let sw: Vec<f64> = (0..n).map(|r| self.weights[r / k].sqrt()).collect();
        let mut s = DMatrix::from_fn(n, n, |r, c| sw[r] * self.flat[(r, c)] / sw[c]);
        // Symmetrize away roundoff before the symmetric solver.
        let st = s.transpose();
        s = (s + st) * 0.5;
        let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

pub fn collision_tensor_sg(
    spec: &KernelSpec,
    grid: &VelocityGrid,
    basis: &GpcBasis,
) -> CollisionOperatorSg {
    CollisionOperatorSg::new(spec, grid, basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ValidationStatus {
    Pass,
    Fail,
}

/// Numeric checks of the kernel bounds and regularity assumptions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelValidation {
    pub declared_min: f64,
    pub declared_max: f64,
    pub sampled_min: f64,
    pub sampled_max: f64,
    pub symmetry_residual: f64,
    /// `max_z ∫∫ (∂_z^j σ)² v² M(v) M(w) dw dv` for `j = 0..=k_max`.
    pub weighted_derivative_norms: Vec<f64>,
    /// `max_{z, v_i} |∫ ∂_z^j σ(v_i, w, z) M(w) dw|` for `j = 0..=k_max`.
    pub derivative_frequency_bounds: Vec<f64>,
    pub status: ValidationStatus,
    pub issues: Vec<String>,
}

impl KernelValidation {
    pub fn passed(&self) -> bool {
        self.status == ValidationStatus::Pass
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::KernelValidation(self.issues.join("; ")))
        }
    }
}

fn uniform_points(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

const LATTICE_POINTS: usize = 61;
const Z_LATTICE_POINTS: usize = 41;
const BOUND_TOL: f64 = 1e-12;

/// Validates declared bounds on a dense `(v, w, z)` lattice and reports the
/// `z`-derivative moments of the kernel. Violations yield a `Fail` status.
pub fn validate_kernel(
    spec: &KernelSpec,
    grid: &VelocityGrid,
    basis: &GpcBasis,
    k_max: u32,
) -> Result<KernelValidation> {
    if k_max > 4 {
        return Err(Error::InvalidArgument(format!(
            "k_max must be at most 4, got {k_max}"
        )));
    }
    let mut issues = Vec::new();
    if !(spec.sigma_min > 0.0) {
        issues.push(format!("declared sigma_min = {} is not positive", spec.sigma_min));
    }
    if !(spec.sigma_min <= spec.sigma_max) {
        issues.push(format!(
            "declared sigma_min = {} exceeds sigma_max = {}",
            spec.sigma_min, spec.sigma_max
        ));
    }

    let vmax = grid.v_max();
    let mut vs: Vec<f64> = grid.nodes().to_vec();
    vs.extend(uniform_points(-vmax, vmax, LATTICE_POINTS));
    let znodes = &basis.quadrature().nodes;
    let mut zs: Vec<f64> = znodes.clone();
    let (zlo, zhi) = match basis.family() {
        PolynomialFamily::LegendreUniform => (-1.0, 1.0),
        PolynomialFamily::HermiteGaussian => (znodes[0], znodes[znodes.len() - 1]),
    };
    if zlo < zhi {
        zs.extend(uniform_points(zlo, zhi, Z_LATTICE_POINTS));
    }

    let mut sampled_min = f64::INFINITY;
    let mut sampled_max = f64::NEG_INFINITY;
    let mut symmetry_residual: f64 = 0.0;
    for &z in &zs {
        for &v in &vs {
            for &w in &vs {
                let s = spec.sigma(v, w, z);
                sampled_min = sampled_min.min(s);
                sampled_max = sampled_max.max(s);
                symmetry_residual = symmetry_residual.max((s - spec.sigma(w, v, z)).abs());
            }
        }
    }
    if sampled_min < spec.sigma_min - BOUND_TOL {
        issues.push(format!(
            "sigma_min violated: sampled minimum {sampled_min} < declared {}",
            spec.sigma_min
        ));
    }
    if sampled_max > spec.sigma_max + BOUND_TOL {
        issues.push(format!(
            "sigma_max violated: sampled maximum {sampled_max} > declared {}",
            spec.sigma_max
        ));
    }
    if symmetry_residual > 1e-14 {
        issues.push(format!("kernel is not symmetric (residual {symmetry_residual:e})"));
    }

    let v = grid.nodes();
    let w = grid.weights();
    let mut weighted_derivative_norms = Vec::new();
    let mut derivative_frequency_bounds = Vec::new();
    for j in 0..=k_max {
        let mut a1: f64 = 0.0;
        let mut a2: f64 = 0.0;
        for &z in znodes {
            let mut integral = 0.0;
            for i in 0..v.len() {
                let mut freq = 0.0;
                for l in 0..v.len() {
                    let d = spec.family.z_derivative(j, v[i], v[l], z);
                    integral += w[i] * w[l] * d * d * v[i] * v[i];
                    freq += w[l] * d;
                }
                a2 = a2.max(freq.abs());
            }
            a1 = a1.max(integral);
        }
        weighted_derivative_norms.push(a1);
        derivative_frequency_bounds.push(a2);
    }

    let status = if issues.is_empty() {
        ValidationStatus::Pass
    } else {
        ValidationStatus::Fail
    };
    Ok(KernelValidation {
        declared_min: spec.sigma_min,
        declared_max: spec.sigma_max,
        sampled_min,
        sampled_max,
        symmetry_residual,
        weighted_derivative_norms,
        derivative_frequency_bounds,
        status,
        issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpc_basis::GpcBasis;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn legendre(k: usize) -> GpcBasis {
        GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, k).unwrap()
    }

    #[test]
    fn sigma_examples() {
        let c = KernelSpec::constant(1.0);
        assert_eq!(sigma_eval(&c, 0.3, -2.0, 0.9), 1.0);
        let a = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5);
        assert_abs_diff_eq!(sigma_eval(&a, 1.0, 2.0, -1.0), 0.5);
        let g = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        );
        assert_abs_diff_eq!(sigma_eval(&g, 0.7, 0.7, 0.0), 1.3, epsilon = 1e-15);
    }

    #[test]
    fn constant_kernel_is_relaxation() {
        let grid = VelocityGrid::new(8).unwrap();
        let op = collision_matrix_colloc(&KernelSpec::constant(2.0), &grid, 0.0);
        let h: Vec<f64> = grid.nodes().iter().map(|v| v * v + 0.3 * v).collect();
        let rho = grid.density(&h);
        for (a, hi) in op.apply(&h).iter().zip(&h) {
            assert_abs_diff_eq!(*a, 2.0 * (rho - hi), epsilon = 1e-13);
        }
        let mut ev: Vec<f64> = op.matrix.clone().eigenvalues().unwrap().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        assert!(ev[7].abs() < 1e-12);
        for e in &ev[..7] {
            assert_abs_diff_eq!(*e, -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn colloc_conserves_mass_and_kills_constants() {
        let grid = VelocityGrid::new(10).unwrap();
        let spec = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        );
        let op = collision_matrix_colloc(&spec, &grid, 0.4);
        assert!(op.apply(&[3.0; 10]).iter().all(|&x| x == 0.0));
        let h: Vec<f64> = (0..10).map(|i| (i as f64 * 1.3).sin()).collect();
        assert!(grid.density(&op.apply(&h)).abs() < 1e-14);
    }

    #[test]
    fn affine_coercivity_on_random_fields() {
        let grid = VelocityGrid::new(8).unwrap();
        let spec = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5);
        let op = collision_matrix_colloc(&spec, &grid, 0.3);
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ah = op.apply(&h);
            let lhs = grid.inner(&ah, &h);
            let rho = grid.density(&h);
            let r: Vec<f64> = h.iter().map(|x| x - rho).collect();
            let defect = grid.inner(&r, &r);
            assert!(lhs <= -0.5 * defect + 1e-14);
            assert!((lhs - op.quadratic_form(&h)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_examples() {
        let grid = VelocityGrid::new(16).unwrap();
        for l in lambda_eval(&KernelSpec::constant(1.7), &grid, 0.2) {
            assert_abs_diff_eq!(l, 1.7, epsilon = 1e-14);
        }
        let spec = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.4 }, 0.6, 1.4);
        for l in lambda_eval(&spec, &grid, -0.5) {
            assert_abs_diff_eq!(l, 0.8, epsilon = 1e-14);
        }
    }

    #[test]
    fn lambda_matches_fine_velocity_rule() {
        let b = 0.3;
        let spec = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.0, b, c: 0.0 },
            1.0,
            1.3,
        );
        let fine = VelocityGrid::new(200).unwrap();
        // The 16-node rule resolves the shifted Gaussian to ~1e-8 only; 48 nodes reach 1e-10.
        for (nv, tol) in [(16, 1e-8), (48, 1e-10)] {
            let grid = VelocityGrid::new(nv).unwrap();
            let lam = lambda_eval(&spec, &grid, 0.0);
            for (i, &vi) in grid.nodes().iter().enumerate() {
                let oracle: f64 = 1.0
                    + b * fine
                        .nodes()
                        .iter()
                        .zip(fine.weights())
                        .map(|(w, om)| om * (-(vi - w) * (vi - w) / 2.0).exp())
                        .sum::<f64>();
                assert!((lam[i] - oracle).abs() <= tol, "nv={nv} node {i}");
                // E_w[exp(−(v−w)²/2)] = exp(−v²/4)/√2.
                let exact = 1.0 + b * (-vi * vi / 4.0).exp() / 2f64.sqrt();
                assert!((oracle - exact).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sg_tensor_examples() {
        let grid = VelocityGrid::new(4).unwrap();
        let basis = legendre(4);
        let op = collision_tensor_sg(&KernelSpec::constant(2.0), &grid, &basis);
        for i in 0..4 {
            for j in 0..4 {
                assert!((op.block(i, j) - DMatrix::<f64>::identity(4, 4) * 2.0).amax() < 1e-13);
            }
        }
        let spec = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5);
        let op = collision_tensor_sg(&spec, &grid, &basis);
        let expected = DMatrix::<f64>::identity(4, 4) + basis.multiply_by_z() * 0.5;
        assert!((op.block(1, 2) - &expected).amax() < 1e-14);
        assert_abs_diff_eq!(op.block(0, 3)[(0, 1)], 0.5 / 3f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn single_mode_reduces_to_z_average() {
        let grid = VelocityGrid::new(6).unwrap();
        let basis = legendre(1);
        let spec = KernelSpec::new(KernelFamily::NonlinearZ { sigma0: 2.0, s: 0.5 }, 1.5, 2.5);
        let op = collision_tensor_sg(&spec, &grid, &basis);
        let v = grid.nodes();
        for i in 0..6 {
            for j in 0..6 {
                let avg = basis.quadrature().integrate(|z| spec.sigma(v[i], v[j], z));
                assert_abs_diff_eq!(op.block(i, j)[(0, 0)], avg, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn point_operator_matches_colloc_matrix() {
        let grid = VelocityGrid::new(6).unwrap();
        let spec = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        );
        let a = collision_matrix_colloc(&spec, &grid, -0.3);
        let p = CollisionOperatorSg::at_point(&spec, &grid, -0.3);
        assert!((a.matrix.clone() - p.flat_matrix()).amax() < 1e-15);
    }

    #[test]
    fn sg_null_space_and_spectrum() {
        let grid = VelocityGrid::new(6).unwrap();
        let basis = legendre(3);
        let spec = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        );
        let op = collision_tensor_sg(&spec, &grid, &basis);
        let ev = op.eigenvalues();
        let zeros = ev.iter().filter(|e| e.abs() < 1e-9).count();
        assert_eq!(zeros, 3);
        assert!(ev.iter().filter(|e| e.abs() >= 1e-9).all(|&e| e <= -0.8 + 1e-9));
        let constant: Vec<f64> = (0..18).map(|r| [1.0, -0.4, 2.5][r % 3]).collect();
        assert!(op.apply(&constant).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn validation_examples() {
        let grid = VelocityGrid::new(8).unwrap();
        let basis = legendre(4);
        let rep = validate_kernel(&KernelSpec::constant(1.0), &grid, &basis, 3).unwrap();
        assert!(rep.passed());
        assert_abs_diff_eq!(rep.weighted_derivative_norms[0], 1.0, epsilon = 1e-14);
        assert!(rep.weighted_derivative_norms[1..].iter().all(|&x| x == 0.0));

        let bad = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 1.5 }, 0.1, 2.5);
        let rep = validate_kernel(&bad, &grid, &basis, 2).unwrap();
        assert_eq!(rep.status, ValidationStatus::Fail);
        assert!(rep.issues[0].contains("sigma_min"));
        assert!(rep.into_result().is_err());

        let nl = KernelSpec::new(KernelFamily::NonlinearZ { sigma0: 2.0, s: 0.5 }, 1.5, 2.5);
        let rep = validate_kernel(&nl, &grid, &basis, 4).unwrap();
        assert!(rep.passed(), "{:?}", rep.issues);
        assert!(rep.sampled_min >= 1.5);
        assert!(validate_kernel(&nl, &grid, &basis, 5).is_err());
    }

    #[test]
    fn nonlinear_derivatives_match_finite_differences() {
        let fam = KernelFamily::NonlinearZ { sigma0: 2.0, s: 0.5 };
        let (v, w, z, h) = (0.4, -0.9, 0.27, 1e-4);
        for j in 0..3 {
            let fd = (fam.z_derivative(j, v, w, z + h) - fam.z_derivative(j, v, w, z - h)) / (2.0 * h);
            assert_abs_diff_eq!(fam.z_derivative(j + 1, v, w, z), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn random_fields_keep_sg_coercivity() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let grid = VelocityGrid::new(6).unwrap();
        let basis = legendre(4);
        let spec = KernelSpec::new(KernelFamily::NonlinearZ { sigma0: 2.0, s: 0.5 }, 1.5, 2.5);
        let op = collision_tensor_sg(&spec, &grid, &basis);
        for _ in 0..20 {
            let h: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut r = h.clone();
            grid.remove_equilibrium(&mut r, 4);
            let defect: f64 = (0..6)
                .map(|i| grid.weights()[i] * (0..4).map(|m| r[i * 4 + m].powi(2)).sum::<f64>())
                .sum();
            assert!(op.energy(&h) <= -1.5 * defect + 1e-10);
            let mass = grid.densities(&op.apply(&h), 4);
            assert!(mass.iter().all(|m| m.abs() < 1e-13));
        }
    }
}
