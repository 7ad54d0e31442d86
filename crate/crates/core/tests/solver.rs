use kinetic_gpc::collision::{KernelFamily, KernelSpec};
use kinetic_gpc::gpc_basis::{gauss_rule, GpcBasis, PolynomialFamily};
use kinetic_gpc::harness::relative_l2;
use kinetic_gpc::kinetic_solver::{
    run, FinalState, ResolvedStepper, RunOptions, Scenario, Scheme, StateSg,
};
use kinetic_gpc::metrics::{dk_norm, gamma_k_norm};
use kinetic_gpc::velocity_quadrature::VelocityGrid;

#[test]
fn micro_macro_agrees_with_resolved_at_moderate_eps() {
    let sc = Scenario {
        kernel: KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5),
        nx: 64,
        epsilon: 0.5,
        t_end: 0.2,
        ..Scenario::default()
    }
    .with_k(1);
    let z = 0.0;
    let mm = run(&sc, Scheme::MicroMacroColloc { z }, sc.t_end).unwrap();
    let rs = run(&sc, Scheme::ResolvedColloc { z }, sc.t_end).unwrap();
    let vgrid = sc.velocity_grid().unwrap();
    let rho_mm = &mm.micro_macro().unwrap().rho;
    let rho_rs = match &rs.state {
        FinalState::Resolved(s) => s.density(&vgrid),
        FinalState::MicroMacro(_) => unreachable!(),
    };
    let d = relative_l2(rho_mm, &rho_rs);
    assert!(d <= 2e-2, "relative distance {d}");
}

#[test]
fn resolved_stepper_rejects_unstable_steps() {
    let sc = Scenario { epsilon: 0.1, ..Scenario::default() };
    let vgrid = sc.velocity_grid().unwrap();
    let op = kinetic_gpc::collision::CollisionOperatorColloc::new(&sc.kernel, &vgrid, 0.0);
    let err = ResolvedStepper::new(&op, &vgrid, sc.spatial_grid().unwrap(), 0.1, 1.0, sc.kernel.sigma_max)
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn small_eps_resolved_requires_opt_in() {
    let sc = Scenario { epsilon: 1e-3, nx: 8, t_end: 1e-6, ..Scenario::default() };
    assert_eq!(run(&sc, Scheme::ResolvedColloc { z: 0.0 }, sc.t_end).unwrap_err().exit_code(), 2);
    let opts = RunOptions { allow_small_eps_resolved: true, ..RunOptions::default() };
    kinetic_gpc::kinetic_solver::run_with(&sc, Scheme::ResolvedColloc { z: 0.0 }, sc.t_end, &opts).unwrap();
}

/// `φ(z) = sin 2z + z³`, a smooth profile whose derivatives are taken by finite differences.
fn phi(z: f64) -> f64 {
    (2.0 * z).sin() + z.powi(3)
}

fn fd(order: u32, z: f64) -> f64 {
    let h = 1e-3;
    match order {
        0 => phi(z),
        1 => (phi(z - 2.0 * h) - 8.0 * phi(z - h) + 8.0 * phi(z + h) - phi(z + 2.0 * h)) / (12.0 * h),
        _ => (-phi(z - 2.0 * h) + 16.0 * phi(z - h) - 30.0 * phi(z) + 16.0 * phi(z + h) - phi(z + 2.0 * h))
            / (12.0 * h * h),
    }
}

#[test]
fn z_derivative_norms_match_finite_differences() {
    let k = 16;
    let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, k).unwrap();
    let c = basis.project(phi);
    let vgrid = VelocityGrid::new(4).unwrap();
    let (nx, nv, eps, dx) = (4, 4, 0.5, 0.25);
    let mut s = StateSg::zeros(nx, nv, k, eps);
    let mut space_sq = 0.0;
    for x in 0..nx {
        let a = 1.0 + x as f64;
        space_sq += dx * a * a;
        for m in 0..k {
            s.rho[x * k + m] = a * c[m];
        }
        for i in 0..nv {
            let b = 0.5 - 0.1 * (x + i) as f64;
            space_sq += eps * eps * dx * vgrid.weights()[i] * b * b;
            for m in 0..k {
                s.g[(x * nv + i) * k + m] = b * c[m];
            }
        }
    }
    let fine = gauss_rule(PolynomialFamily::LegendreUniform, 40).unwrap();
    let mut sum = 0.0;
    for order in 0..=2u32 {
        let z_sq = fine.integrate(|z| fd(order, z).powi(2));
        sum += z_sq;
        let expect = (space_sq * z_sq).sqrt();
        let got = dk_norm(&s, &basis, &vgrid, dx, order);
        assert!((got - expect).abs() <= 1e-6 * expect, "order {order}: {got} vs {expect}");
    }
    let got = gamma_k_norm(&s, &basis, &vgrid, dx, 2);
    let expect = (space_sq * sum).sqrt();
    assert!((got - expect).abs() <= 1e-6 * expect);
}
