//! Galerkin drift-diffusion system `∂t ρ̂ = ∂ₓ(D_sg ∂ₓ ρ̂)` reached as `ε → 0`.
//!
//! Two coefficient matrices are available. The frequency form integrates
//! `v² / λ(v, z)` jointly over velocity and `z`; the exact form inverts the
//! Galerkin collision operator on the complement of its null space. Pointwise in
//! `z` they agree whenever the collision frequency does not depend on `v`; after
//! Galerkin truncation in `z` they differ because the inverse of a projected
//! multiplication operator is not the projection of its inverse.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::collision::{lambda_eval, CollisionOperatorSg, KernelSpec};
use crate::error::{Error, Result};
use crate::gpc_basis::GpcBasis;
use crate::kinetic_solver::{fit_steps, SpatialGrid};
use crate::velocity_quadrature::VelocityGrid;

/// Which construction produced a diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionVariant {
    FrequencyFormula,
    ExactInverse,
}

/// `D[j,l] = Σ_i ω_i v_i² ∫ ψ_j ψ_l / λ(v_i, z) π dz`.
pub fn assemble_frequency_d(
    spec: &KernelSpec,
    vgrid: &VelocityGrid,
    basis: &GpcBasis,
) -> Result<DMatrix<f64>> {
    let k = basis.len();
    let quad = basis.quadrature();
    let mut d = DMatrix::zeros(k, k);
    for (q, (&z, &wz)) in quad.nodes.iter().zip(&quad.weights).enumerate() {
        let lambda = lambda_eval(spec, vgrid, z);
        let mut inv = 0.0;
        for (i, l) in lambda.iter().enumerate() {
            if !(*l > 0.0) {
                return Err(Error::KernelValidation(format!(
                    "collision frequency {l:e} is not positive at v={}, z={z}",
                    vgrid.nodes()[i]
                )));
            }
            inv += vgrid.weights()[i] * vgrid.nodes()[i].powi(2) / l;
        }
        for j in 0..k {
            let pj = basis.node_values(j)[q];
            for l in 0..k {
                d[(j, l)] += wz * inv * pj * basis.node_values(l)[q];
            }
        }
    }
    Ok(d)
}

/// `S[j,l] = ∫ ψ_j ψ_l / λ(v, z) π dz` at a fixed velocity `v`.
pub fn s_matrix(spec: &KernelSpec, vgrid: &VelocityGrid, basis: &GpcBasis, v: f64) -> DMatrix<f64> {
    basis.galerkin_matrix(|z| {
        let lambda: f64 = vgrid
            .nodes()
            .iter()
            .zip(vgrid.weights())
            .map(|(w, o)| o * spec.sigma(v, *w, z))
            .sum();
        1.0 / lambda
    })
}

/// `D[k,l] = −Σ_i ω_i v_i W^{(k)}_{i,l}` where `Q_sg W^{(k)} = v ⊗ e_k` and `Π W^{(k)} = 0`.
pub fn assemble_exact_d(op: &CollisionOperatorSg, vgrid: &VelocityGrid) -> Result<DMatrix<f64>> {
    let (nv, k) = (op.nv(), op.k());
    let n = op.dim();
    let deflated = op.flat_matrix() - op.null_projector();
    let mut rhs = DMatrix::zeros(n, k);
    for (i, v) in vgrid.nodes().iter().enumerate() {
        for m in 0..k {
            rhs[(i * k + m, m)] = *v;
        }
    }
    let lu = deflated.lu();
    let mut w = lu.solve(&rhs).ok_or(Error::SingularMatrix)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularMatrix);
    }
    for c in 0..k {
        let mut col: Vec<f64> = w.column(c).iter().copied().collect();
        vgrid.remove_equilibrium(&mut col, k);
        w.column_mut(c).copy_from_slice(&col);
    }
    let mut d = DMatrix::zeros(k, k);
    for c in 0..k {
        for l in 0..k {
            let mut acc = 0.0;
            for i in 0..nv {
                acc += vgrid.weights()[i] * vgrid.nodes()[i] * w[(i * k + l, c)];
            }
            d[(c, l)] = -acc;
        }
    }
    Ok(d)
}

/// Eigenvalues of the symmetric part of `d`, ascending.
pub fn symmetric_eigenvalues(d: &DMatrix<f64>) -> Vec<f64> {
    let sym = (d + d.transpose()) * 0.5;
    let mut e: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_frobenius_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Time discretization of [`drift_diffusion_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMethod {
    #[default]
    Explicit,
    BackwardEuler,
}

/// Largest explicit step: `0.45 Δx² / (2 max eig D)`.
pub fn explicit_dt_limit(d: &DMatrix<f64>, grid: &SpatialGrid) -> f64 {
    let emax = symmetric_eigenvalues(d).last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    0.45 * grid.dx().powi(2) / (2.0 * emax)
}

/// `L ρ̂` for the periodic three-point Laplacian applied through `D`.
fn diffusion_rate(d: &DMatrix<f64>, rho: &[f64], nx: usize, k: usize, dx: f64) -> Vec<f64> {
    let mut out = vec![0.0; nx * k];
    let inv = 1.0 / (dx * dx);
    for x in 0..nx {
        let l = (x + nx - 1) % nx;
        let r = (x + 1) % nx;
        for j in 0..k {
            let mut acc = 0.0;
            for m in 0..k {
                let lap = rho[r * k + m] - 2.0 * rho[x * k + m] + rho[l * k + m];
                acc += d[(j, m)] * lap;
            }
            out[x * k + j] = acc * inv;
        }
    }
    out
}

/// Solves the Galerkin diffusion system to `t_end` on a periodic grid.
///
/// `rho0` is cell-major (`rho0[x * K + m]`). `dt` is rounded down so that an
/// integer number of steps reaches `t_end`; in explicit mode it must respect
/// [`explicit_dt_limit`].
pub fn drift_diffusion_solve(
    d: &DMatrix<f64>,
    grid: &SpatialGrid,
    rho0: &[f64],
    t_end: f64,
    dt: f64,
    method: TimeMethod,
) -> Result<Vec<f64>> {
    let k = d.nrows();
    let nx = grid.nx();
    if d.ncols() != k || rho0.len() != nx * k {
        return Err(Error::InvalidArgument(format!(
            "expected {}×{k} initial data for a {k}×{k} diffusion matrix, got {} values",
            nx,
            rho0.len()
        )));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!("need dt > 0 and t_end ≥ 0 (dt={dt}, t_end={t_end})")));
    }
    let (steps, dt) = fit_steps(t_end, dt);
    let dx = grid.dx();
    let mut rho = rho0.to_vec();
    match method {
        TimeMethod::Explicit => {
            let limit = explicit_dt_limit(d, grid);
            if steps > 0 && dt > limit * (1.0 + 1e-12) {
                return Err(Error::CflViolation { dt, limit });
            }
            for n in 1..=steps {
                let rate = diffusion_rate(d, &rho, nx, k, dx);
                for (r, q) in rho.iter_mut().zip(&rate) {
                    *r += dt * q;
                }
                if rho.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step: n });
                }
            }
        }
        TimeMethod::BackwardEuler => {
            let n = nx * k;
            let mut m = DMatrix::<f64>::identity(n, n);
            let c = dt / (dx * dx);
            for x in 0..nx {
                let l = (x + nx - 1) % nx;
                let r = (x + 1) % nx;
                for j in 0..k {
                    for q in 0..k {
                        let dj = c * d[(j, q)];
                        m[(x * k + j, x * k + q)] += 2.0 * dj;
                        m[(x * k + j, l * k + q)] -= dj;
                        m[(x * k + j, r * k + q)] -= dj;
                    }
                }
            }
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(Error::SingularMatrix);
            }
            let mut b = nalgebra::DVector::from_vec(rho);
            for step in 1..=steps {
                if !lu.solve_mut(&mut b) {
                    return Err(Error::SingularMatrix);
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step });
                }
            }
            rho = b.as_slice().to_vec();
        }
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::KernelFamily;
    use crate::gpc_basis::PolynomialFamily;
    use std::f64::consts::PI;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn constant_kernel_gives_scaled_identity() {
        let vgrid = VelocityGrid::new(12).unwrap();
        let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 4).unwrap();
        let spec = KernelSpec::constant(2.0);
        let id = DMatrix::identity(4, 4) * 0.5;
        let freq = assemble_frequency_d(&spec, &vgrid, &basis).unwrap();
        let op = CollisionOperatorSg::new(&spec, &vgrid, &basis);
        let exact = assemble_exact_d(&op, &vgrid).unwrap();
        assert!(max_abs_diff(&freq, &id) <= 1e-12);
        assert!(max_abs_diff(&exact, &id) <= 1e-12);
    }

    #[test]
    fn affine_kernel_closed_form_and_oracle() {
        let vgrid = VelocityGrid::new(12).unwrap();
        let spec = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5);
        let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 2).unwrap();
        let d = assemble_frequency_d(&spec, &vgrid, &basis).unwrap();
        assert!((d[(0, 0)] - 3f64.ln()).abs() <= 1e-12);

        let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 4).unwrap();
        let d = assemble_frequency_d(&spec, &vgrid, &basis).unwrap();
        let fine = crate::gpc_basis::gauss_rule(PolynomialFamily::LegendreUniform, 100).unwrap();
        let psi = |j: usize, z: f64| -> f64 {
            let b = GpcBasis::new(PolynomialFamily::LegendreUniform, 4, 4).unwrap();
            b.eval(z)[j]
        };
        for j in 0..4 {
            for l in 0..4 {
                let oracle: f64 = fine
                    .nodes
                    .iter()
                    .zip(&fine.weights)
                    .map(|(&z, &w)| w * psi(j, z) * psi(l, z) / (1.0 + 0.5 * z))
                    .sum();
                assert!((d[(j, l)] - oracle).abs() <= 1e-10, "({j},{l})");
            }
        }

        let t = vgrid.second_moment();
        let s = s_matrix(&spec, &vgrid, &basis, 0.7);
        assert!(max_abs_diff(&d, &(s * t)) <= 1e-12);

    }

    #[test]
    fn variants_agree_for_velocity_independent_frequency() {
        let vgrid = VelocityGrid::new(12).unwrap();
        let spec = KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5);
        // Pointwise in z both constructions reduce to T / λ(z).
        for z in [-0.9, -0.3, 0.0, 0.4, 1.0] {
            let op = CollisionOperatorSg::at_point(&spec, &vgrid, z);
            let exact = assemble_exact_d(&op, &vgrid).unwrap();
            let freq = vgrid.second_moment() / (1.0 + 0.5 * z);
            assert!((exact[(0, 0)] - freq).abs() <= 1e-10 * freq);
        }
        // Under Galerkin truncation the inverse of the projected operator differs
        // from the projection of the inverse; the leading entry still converges spectrally.
        let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 12).unwrap();
        let freq = assemble_frequency_d(&spec, &vgrid, &basis).unwrap();
        let op = CollisionOperatorSg::new(&spec, &vgrid, &basis);
        let exact = assemble_exact_d(&op, &vgrid).unwrap();
        assert!((exact[(0, 0)] - freq[(0, 0)]).abs() <= 1e-10);
        assert!(relative_frobenius_gap(&exact, &freq) > 1e-3);

        let spec = KernelSpec::constant(1.7);
        let op = CollisionOperatorSg::new(&spec, &vgrid, &basis);
        let exact = assemble_exact_d(&op, &vgrid).unwrap();
        let freq = assemble_frequency_d(&spec, &vgrid, &basis).unwrap();
        assert!(relative_frobenius_gap(&exact, &freq) <= 1e-10);
    }

    #[test]
    fn exact_matrix_is_symmetric_positive_definite() {
        let vgrid = VelocityGrid::new(16).unwrap();
        let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 5).unwrap();
        let spec = KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        );
        let op = CollisionOperatorSg::new(&spec, &vgrid, &basis);
        let d = assemble_exact_d(&op, &vgrid).unwrap();
        assert!(max_abs_diff(&d, &d.transpose()) <= 1e-12);
        let lo = symmetric_eigenvalues(&d)[0];
        assert!(lo >= vgrid.second_moment() / spec.sigma_max - 1e-10);
    }

    fn sine_data(grid: &SpatialGrid, amps: &[f64]) -> Vec<f64> {
        let k = amps.len();
        let mut rho = vec![0.0; grid.nx() * k];
        for x in 0..grid.nx() {
            let s = grid.center(x).sin();
            for m in 0..k {
                rho[x * k + m] = if m == 0 { 1.0 + amps[0] * s } else { amps[m] * s };
            }
        }
        rho
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn heat_equation_anchor() {
        let grid = SpatialGrid::new(64, 2.0 * PI).unwrap();
        let d = DMatrix::identity(1, 1);
        let rho0 = sine_data(&grid, &[1.0]);
        let dt = explicit_dt_limit(&d, &grid);
        let exact: Vec<f64> = (0..64).map(|x| 1.0 + (-0.5f64).exp() * grid.center(x).sin()).collect();
        for method in [TimeMethod::Explicit, TimeMethod::BackwardEuler] {
            let rho = drift_diffusion_solve(&d, &grid, &rho0, 0.5, dt, method).unwrap();
            assert!(rel_l2(&rho, &exact) <= 5e-3, "{method:?}");
            let mass: f64 = rho.iter().sum::<f64>() - rho0.iter().sum::<f64>();
            assert!(mass.abs() * grid.dx() <= 1e-12);
        }
        let flat = vec![3.0; 64];
        assert_eq!(drift_diffusion_solve(&d, &grid, &flat, 0.5, dt, TimeMethod::Explicit).unwrap(), flat);
        assert!(matches!(
            drift_diffusion_solve(&d, &grid, &rho0, 0.5, 2.0 * dt, TimeMethod::Explicit),
            Err(Error::CflViolation { .. })
        ));
    }

    #[test]
    fn decoupled_modes_decay_at_their_own_rates() {
        let grid = SpatialGrid::new(64, 2.0 * PI).unwrap();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let rho0 = sine_data(&grid, &[0.0, 0.7]);
        let dt = explicit_dt_limit(&d, &grid);
        let rho = drift_diffusion_solve(&d, &grid, &rho0, 0.5, dt, TimeMethod::Explicit).unwrap();
        let amp: f64 = (0..64).map(|x| rho[x * 2 + 1] * grid.center(x).sin()).sum::<f64>() * 2.0 / 64.0;
        assert!((amp - 0.7 * (-1.0f64).exp()).abs() <= 5e-3);
    }
}
