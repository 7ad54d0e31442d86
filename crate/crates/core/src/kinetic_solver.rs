//! Time integration of `ε ∂t f + v ∂x f = Q(f)/ε` on a periodic 1-D grid.
//!
//! The asymptotic-preserving scheme splits `h = ρ + ε g` with `Πg = 0`
//! (micro-macro decomposition). `ρ` lives at cell centers, `g` at cell
//! interfaces, and one step is
//!
//! 1. `Φ = (I − Π)[v⁺ D⁻ g + v⁻ D⁺ g]` (upwind, per mode),
//! 2. `(ε² − Δt Q) g* = ε² gⁿ − Δt (v Dₓρⁿ + ε Φ)`,
//! 3. `gⁿ⁺¹ = (I − Π) g*`,
//! 4. `ρⁿ⁺¹ = ρⁿ − Δt/Δx (F_{i+½} − F_{i−½})` with `F = Σ ω v gⁿ⁺¹`.
//!
//! The stochastic Galerkin (`K` modes) and collocation (`K = 1` at a fixed `z`)
//! variants share this stepper; only the collision operator differs. A fully
//! resolved explicit RK2 integrator serves as a reference for moderate `ε`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::collision::{
    validate_kernel, CollisionOperatorColloc, CollisionOperatorSg, KernelSpec,
};
use crate::error::{Error, Result};
use crate::gpc_basis::{default_quad_order, GpcBasis, PolynomialFamily};
use crate::metrics;
use crate::velocity_quadrature::VelocityGrid;

/// Relative tolerance on per-mode mass drift over a full run.
pub const MASS_TOLERANCE: f64 = 1e-10;

/// Periodic cell-centered grid on `[0, L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    nx: usize,
    length: f64,
}

impl SpatialGrid {
    pub fn new(nx: usize, length: f64) -> Result<Self> {
        if nx < 4 || nx % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "nx must be even and at least 4, got {nx}"
            )));
        }
        if !(length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "domain length must be positive, got {length}"
            )));
        }
        Ok(Self { nx, length })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    /// Position of interface `i + ½`, the right edge of cell `i`.
    pub fn interface(&self, i: usize) -> f64 {
        (i as f64 + 1.0) * self.dx()
    }
}

/// Parameters of the initial data
/// `ρ₀(x, z) = (c₀ + c₁ sin(2πx/L))(1 + αz)`, `g₀ = δ v cos(2πx/L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialData {
    pub c0: f64,
    pub c1: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            c0: 1.0,
            c1: 0.5,
            alpha: 0.3,
            delta: 0.0,
        }
    }
}

impl InitialData {
    pub fn density_x(&self, x: f64, length: f64) -> f64 {
        self.c0 + self.c1 * (2.0 * PI * x / length).sin()
    }

    pub fn z_modulation(&self, z: f64) -> f64 {
        1.0 + self.alpha * z
    }

    pub fn seed_x(&self, x: f64, length: f64) -> f64 {
        self.delta * (2.0 * PI * x / length).cos()
    }
}

/// Time integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    MicroMacroSg,
    MicroMacroColloc { z: f64 },
    ResolvedColloc { z: f64 },
}

/// A complete problem description.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kernel: KernelSpec,
    pub z_family: PolynomialFamily,
    pub nx: usize,
    pub nv: usize,
    pub k: usize,
    pub quad_order: usize,
    pub epsilon: f64,
    pub t_end: f64,
    pub cfl: f64,
    pub length: f64,
    pub init: InitialData,
    pub diag_every: usize,
}

impl Default for Scenario {
    /// Analytic-in-`z` anisotropic scenario used throughout the harness.
    fn default() -> Self {
        Self {
            kernel: KernelSpec::new(
                crate::collision::KernelFamily::AnisotropicGaussian {
                    sigma0: 1.0,
                    a: 0.2,
                    b: 0.3,
                    c: 0.5,
                },
                0.8,
                1.65,
            ),
            z_family: PolynomialFamily::LegendreUniform,
            nx: 32,
            nv: 16,
            k: 6,
            quad_order: default_quad_order(6),
            epsilon: 1.0,
            t_end: 0.5,
            cfl: 0.45,
            length: 2.0 * PI,
            init: InitialData::default(),
            diag_every: 1,
        }
    }
}

impl Scenario {
    /// Same scenario with `K` modes and the matching default quadrature order.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self.quad_order = default_quad_order(k);
        self
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.nx, self.length)
    }

    pub fn velocity_grid(&self) -> Result<VelocityGrid> {
        VelocityGrid::new(self.nv)
    }

    pub fn basis(&self) -> Result<GpcBasis> {
        GpcBasis::new(self.z_family, self.k, self.quad_order)
    }

    /// Checks the parameter invariants and validates the kernel.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t_end must be non-negative, got {}",
                self.t_end
            )));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cfl must lie in (0, 1], got {}",
                self.cfl
            )));
        }
        if self.diag_every == 0 {
            return Err(Error::InvalidArgument("diag_every must be at least 1".into()));
        }
        let init = &self.init;
        if !(init.c0 > init.c1.abs() * (1.0 + init.alpha.abs())) {
            return Err(Error::InvalidArgument(format!(
                "initial density may turn negative: need c0 > |c1|(1 + |alpha|), got c0={} c1={} alpha={}",
                init.c0, init.c1, init.alpha
            )));
        }
        self.spatial_grid()?;
        let vgrid = self.velocity_grid()?;
        let basis = self.basis()?;
        validate_kernel(&self.kernel, &vgrid, &basis, 2)?.into_result()?;
        Ok(())
    }
}

/// Micro-macro state: `ρ̂` at centers (`rho[x * K + m]`) and `ĝ` at interfaces
/// (`g[(x * Nv + i) * K + m]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSg {
    pub nx: usize,
    pub nv: usize,
    pub k: usize,
    pub eps: f64,
    pub t: f64,
    pub rho: Vec<f64>,
    pub g: Vec<f64>,
}

impl StateSg {
    pub fn zeros(nx: usize, nv: usize, k: usize, eps: f64) -> Self {
        Self {
            nx,
            nv,
            k,
            eps,
            t: 0.0,
            rho: vec![0.0; nx * k],
            g: vec![0.0; nx * nv * k],
        }
    }

    /// Fluctuation block at interface `x`, node-major.
    pub fn g_block(&self, x: usize) -> &[f64] {
        let n = self.nv * self.k;
        &self.g[x * n..(x + 1) * n]
    }

    pub fn rho_modes(&self, x: usize) -> &[f64] {
        &self.rho[x * self.k..(x + 1) * self.k]
    }

    /// `Σ_x Δx ρ̂_{x,m}` for every mode.
    pub fn mass(&self, dx: f64) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for x in 0..self.nx {
            for (acc, r) in m.iter_mut().zip(self.rho_modes(x)) {
                *acc += dx * r;
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(&self.g).all(|v| v.is_finite())
    }

    /// Initial state for the stochastic Galerkin scheme.
    pub fn initial_sg(
        init: &InitialData,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        basis: &GpcBasis,
        eps: f64,
    ) -> Self {
        let zmodes = basis.project(|z| init.z_modulation(z));
        Self::initial_with_modes(init, grid, vgrid, &zmodes, eps)
    }

    /// Initial state for the collocation scheme at a fixed `z`.
    pub fn initial_colloc(
        init: &InitialData,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        z: f64,
        eps: f64,
    ) -> Self {
        Self::initial_with_modes(init, grid, vgrid, &[init.z_modulation(z)], eps)
    }

    fn initial_with_modes(
        init: &InitialData,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        zmodes: &[f64],
        eps: f64,
    ) -> Self {
        let (nx, nv, k) = (grid.nx(), vgrid.len(), zmodes.len());
        let mut s = Self::zeros(nx, nv, k, eps);
        let length = grid.length();
        for x in 0..nx {
            let r = init.density_x(grid.center(x), length);
            for m in 0..k {
                s.rho[x * k + m] = r * zmodes[m];
            }
            let seed = init.seed_x(grid.interface(x), length);
            let n = nv * k;
            let block = &mut s.g[x * n..(x + 1) * n];
            for (i, v) in vgrid.nodes().iter().enumerate() {
                block[i * k] = seed * v;
            }
            vgrid.remove_equilibrium(block, k);
        }
        s
    }
}

/// Upper bound `T/σ_min` on every diffusion coefficient the kernel can produce.
pub fn diffusion_bound(vgrid: &VelocityGrid, sigma_min: f64) -> f64 {
    vgrid.second_moment() / sigma_min
}

/// Micro-macro step size for a given `ε`.
///
/// `cfl · min(Δx²/(2 D), 2ε²/(2ε v_max/Δx − σ_min))`, the second term only when
/// its denominator is positive. It is the von Neumann limit of implicit
/// relaxation against explicit upwind transport of the fastest node and never
/// drops below [`uniform_micromacro_dt`].
pub fn micromacro_dt(
    grid: &SpatialGrid,
    vgrid: &VelocityGrid,
    eps: f64,
    sigma_min: f64,
    cfl: f64,
) -> f64 {
    let dx = grid.dx();
    let diffusive = dx * dx / (2.0 * diffusion_bound(vgrid, sigma_min));
    let excess = 2.0 * eps * vgrid.v_max() / dx - sigma_min;
    let transport = if excess > 0.0 {
        2.0 * eps * eps / excess
    } else {
        f64::INFINITY
    };
    cfl * diffusive.min(transport)
}

/// `ε`-independent micro-macro step size: the minimum of [`micromacro_dt`] over all `ε`.
pub fn uniform_micromacro_dt(
    grid: &SpatialGrid,
    vgrid: &VelocityGrid,
    sigma_min: f64,
    cfl: f64,
) -> f64 {
    let dx = grid.dx();
    let vmax = vgrid.v_max();
    let diffusive = dx * dx / (2.0 * diffusion_bound(vgrid, sigma_min));
    let transport = 2.0 * sigma_min * dx * dx / (vmax * vmax);
    cfl * diffusive.min(transport)
}

/// Stability limit of the resolved RK2 integrator.
pub fn resolved_dt_limit(grid: &SpatialGrid, vgrid: &VelocityGrid, eps: f64, sigma_max: f64) -> f64 {
    0.5 * (eps * grid.dx() / vgrid.v_max()).min(eps * eps / (2.0 * sigma_max))
}

/// Rounds `dt` down so that an integer number of steps reaches `t_end`.
pub fn fit_steps(t_end: f64, dt: f64) -> (usize, f64) {
    if t_end <= 0.0 {
        return (0, dt);
    }
    let steps = (t_end / dt * (1.0 - 1e-14)).ceil().max(1.0) as usize;
    (steps, t_end / steps as f64)
}

/// One-step operator of the micro-macro scheme with a pre-factorized implicit matrix.
#[derive(Debug, Clone)]
pub struct MicroMacroStepper {
    grid: SpatialGrid,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    k: usize,
    eps: f64,
    dt: f64,
    /// Inverse of `ε² I − Δt Q + P` obtained from its LU factorization, where `P`
    /// projects onto the null space of `Q`. Right-hand sides satisfy `Π rhs = 0`,
    /// so `P` leaves the solution unchanged while removing the near-singular
    /// null directions at small `ε`.
    solve: DMatrix<f64>,
}

impl MicroMacroStepper {
    pub fn new(
        op: &CollisionOperatorSg,
        vgrid: &VelocityGrid,
        grid: SpatialGrid,
        eps: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(eps > 0.0) || !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps and dt must be positive (eps={eps}, dt={dt})"
            )));
        }
        let n = op.dim();
        let m = DMatrix::<f64>::identity(n, n) * (eps * eps) - op.flat_matrix() * dt
            + op.null_projector();
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularMatrix);
        }
        let solve = lu.try_inverse().ok_or(Error::SingularMatrix)?;
        if solve.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        Ok(Self {
            grid,
            nodes: vgrid.nodes().to_vec(),
            weights: vgrid.weights().to_vec(),
            k: op.k(),
            eps,
            dt,
            solve,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn remove_equilibrium(&self, block: &mut [f64]) {
        let k = self.k;
        let mut rho = vec![0.0; k];
        for (i, w) in self.weights.iter().enumerate() {
            for m in 0..k {
                rho[m] += w * block[i * k + m];
            }
        }
        for i in 0..self.nodes.len() {
            for m in 0..k {
                block[i * k + m] -= rho[m];
            }
        }
    }

    /// Advances `state` by one step; `step_index` is reported on failure.
    pub fn step(&self, state: &mut StateSg, step_index: usize) -> Result<()> {
        let (nx, k) = (self.grid.nx(), self.k);
        let nv = self.nodes.len();
        let n = nv * k;
        let dx = self.grid.dx();
        let (eps, dt) = (self.eps, self.dt);

        let mut rhs = DMatrix::<f64>::zeros(n, nx);
        let mut phi = vec![0.0; n];
        for s in 0..nx {
            let left = (s + nx - 1) % nx;
            let right = (s + 1) % nx;
            let g = state.g_block(s);
            let gl = state.g_block(left);
            let gr = state.g_block(right);
            for i in 0..nv {
                let v = self.nodes[i];
                for m in 0..k {
                    let r = i * k + m;
                    phi[r] = if v > 0.0 {
                        v * (g[r] - gl[r]) / dx
                    } else {
                        v * (gr[r] - g[r]) / dx
                    };
                }
            }
            self.remove_equilibrium(&mut phi);
            let rho_s = state.rho_modes(s);
            let rho_r = state.rho_modes(right);
            let mut col = rhs.column_mut(s);
            for i in 0..nv {
                let v = self.nodes[i];
                for m in 0..k {
                    let r = i * k + m;
                    let drho = (rho_r[m] - rho_s[m]) / dx;
                    col[r] = eps * eps * g[r] - dt * (v * drho + eps * phi[r]);
                }
            }
        }

        let solved = &self.solve * rhs;
        for s in 0..nx {
            let block = &mut state.g[s * n..(s + 1) * n];
            block.copy_from_slice(solved.column(s).as_slice());
            self.remove_equilibrium(block);
        }

        let mut flux = vec![0.0; nx * k];
        for s in 0..nx {
            let block = state.g_block(s);
            for i in 0..nv {
                let wv = self.weights[i] * self.nodes[i];
                for m in 0..k {
                    flux[s * k + m] += wv * block[i * k + m];
                }
            }
        }
        for c in 0..nx {
            let left = (c + nx - 1) % nx;
            for m in 0..k {
                state.rho[c * k + m] -= dt / dx * (flux[c * k + m] - flux[left * k + m]);
            }
        }
        state.t += dt;
        if !state.is_finite() {
            return Err(Error::NonFinite { step: step_index });
        }
        Ok(())
    }
}

/// `h = f/M` at cell centers for a single `z`, `h[x * Nv + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedState {
    pub nx: usize,
    pub nv: usize,
    pub eps: f64,
    pub z: f64,
    pub t: f64,
    pub h: Vec<f64>,
}

impl ResolvedState {
    pub fn initial(
        init: &InitialData,
        grid: &SpatialGrid,
        vgrid: &VelocityGrid,
        z: f64,
        eps: f64,
    ) -> Self {
        let (nx, nv) = (grid.nx(), vgrid.len());
        let mut h = vec![0.0; nx * nv];
        for x in 0..nx {
            let xc = grid.center(x);
            let rho = init.density_x(xc, grid.length()) * init.z_modulation(z);
            let seed = init.seed_x(xc, grid.length());
            for (i, v) in vgrid.nodes().iter().enumerate() {
                h[x * nv + i] = rho + eps * seed * v;
            }
        }
        Self {
            nx,
            nv,
            eps,
            z,
            t: 0.0,
            h,
        }
    }

    /// Cell densities `Σ_i ω_i h_{x,i}`.
    pub fn density(&self, vgrid: &VelocityGrid) -> Vec<f64> {
        (0..self.nx)
            .map(|x| vgrid.density(&self.h[x * self.nv..(x + 1) * self.nv]))
            .collect()
    }
}

/// Explicit RK2 (Heun) integrator of `∂t h = −v ∂x h / ε + A h / ε²` with upwind transport.
#[derive(Debug, Clone)]
pub struct ResolvedStepper {
    grid: SpatialGrid,
    nodes: Vec<f64>,
    eps: f64,
    dt: f64,
    collision: DMatrix<f64>,
}

impl ResolvedStepper {
    pub fn new(
        op: &CollisionOperatorColloc,
        vgrid: &VelocityGrid,
        grid: SpatialGrid,
        eps: f64,
        dt: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        let limit = resolved_dt_limit(&grid, vgrid, eps, sigma_max);
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        Ok(Self {
            grid,
            nodes: vgrid.nodes().to_vec(),
            eps,
            dt,
            collision: op.matrix.clone(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn rate(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        // h is Nv × Nx, one column per cell.
        let nx = self.grid.nx();
        let dx = self.grid.dx();
        let mut out = &self.collision * h / (self.eps * self.eps);
        for x in 0..nx {
            let left = (x + nx - 1) % nx;
            let right = (x + 1) % nx;
            for (i, &v) in self.nodes.iter().enumerate() {
                let grad = if v > 0.0 {
                    (h[(i, x)] - h[(i, left)]) / dx
                } else {
                    (h[(i, right)] - h[(i, x)]) / dx
                };
                out[(i, x)] -= v * grad / self.eps;
            }
        }
        out
    }

    pub fn step(&self, state: &mut ResolvedState, step_index: usize) -> Result<()> {
        let h = DMatrix::from_column_slice(state.nv, state.nx, &state.h);
        let k1 = self.rate(&h);
        let h1 = &h + &k1 * self.dt;
        let k2 = self.rate(&h1);
        let next = h + (k1 + k2) * (0.5 * self.dt);
        state.h.copy_from_slice(next.as_slice());
        state.t += self.dt;
        if state.h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: step_index });
        }
        Ok(())
    }
}

/// One row of the diagnostics time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass_mode0: f64,
    pub gamma_norm: f64,
    pub defect_norm: f64,
    pub dk1_norm: f64,
    pub dk2_norm: f64,
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalState {
    MicroMacro(StateSg),
    Resolved(ResolvedState),
}

/// Space, velocity and time discretization of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub nx: usize,
    pub nv: usize,
    pub length: f64,
    pub eps: f64,
    pub dt: f64,
    pub steps: usize,
    pub t_end: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: FinalState,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub discretization: Discretization,
    pub initial_mass: Vec<f64>,
    pub final_mass: Vec<f64>,
}

impl RunOutput {
    pub fn micro_macro(&self) -> Option<&StateSg> {
        match &self.state {
            FinalState::MicroMacro(s) => Some(s),
            FinalState::Resolved(_) => None,
        }
    }

    /// Largest per-mode mass drift relative to the largest initial mode mass.
    pub fn mass_drift(&self) -> f64 {
        let scale = self
            .initial_mass
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        self.initial_mass
            .iter()
            .zip(&self.final_mass)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max)
    }
}

/// Knobs that are not part of the physical scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Overrides the scheme's step-size rule (still rounded to hit `t_end`).
    pub dt: Option<f64>,
    /// Permits the resolved scheme below `ε = 1e-2`.
    pub allow_small_eps_resolved: bool,
    /// Skips kernel validation (used by fault-injection tests only).
    pub skip_validation: bool,
}

/// Runs a scenario to `t_end` with the default options.
pub fn run(scenario: &Scenario, scheme: Scheme, t_end: f64) -> Result<RunOutput> {
    run_with(scenario, scheme, t_end, &RunOptions::default())
}

pub fn run_with(
    scenario: &Scenario,
    scheme: Scheme,
    t_end: f64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    run_observed(scenario, scheme, t_end, opts, &mut |_| {})
}

/// Like [`run_with`], calling `observer` on the initial micro-macro state and
/// after every step. The resolved scheme never calls it.
pub fn run_observed(
    scenario: &Scenario,
    scheme: Scheme,
    t_end: f64,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StateSg),
) -> Result<RunOutput> {
    if !opts.skip_validation {
        scenario.validate()?;
    }
    if !(t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!("t_end must be non-negative, got {t_end}")));
    }
    let grid = scenario.spatial_grid()?;
    let vgrid = scenario.velocity_grid()?;
    let eps = scenario.epsilon;
    match scheme {
        Scheme::MicroMacroSg => {
            let basis = scenario.basis()?;
            let op = CollisionOperatorSg::new(&scenario.kernel, &vgrid, &basis);
            let state = StateSg::initial_sg(&scenario.init, &grid, &vgrid, &basis, eps);
            let dmat = basis.z_derivative_matrix();
            run_micro_macro(scenario, &grid, &vgrid, &op, state, Some(&dmat), t_end, opts, observer)
        }
        Scheme::MicroMacroColloc { z } => {
            let op = CollisionOperatorSg::at_point(&scenario.kernel, &vgrid, z);
            let state = StateSg::initial_colloc(&scenario.init, &grid, &vgrid, z, eps);
            run_micro_macro(scenario, &grid, &vgrid, &op, state, None, t_end, opts, observer)
        }
        Scheme::ResolvedColloc { z } => {
            if eps < 1e-2 && !opts.allow_small_eps_resolved {
                return Err(Error::CostGuard { eps });
            }
            run_resolved(scenario, &grid, &vgrid, z, t_end, opts)
        }
    }
}

fn micro_macro_row(
    state: &StateSg,
    vgrid: &VelocityGrid,
    dx: f64,
    dmat: Option<&DMatrix<f64>>,
) -> DiagnosticsRow {
    let (dk1, dk2) = match dmat {
        Some(d) => (
            metrics::dk_norm_with(state, vgrid, dx, d, 1),
            metrics::dk_norm_with(state, vgrid, dx, d, 2),
        ),
        None => (0.0, 0.0),
    };
    DiagnosticsRow {
        t: state.t,
        mass_mode0: state.mass(dx)[0],
        gamma_norm: metrics::gamma_norm(state, vgrid, dx),
        defect_norm: metrics::defect_norm(state, vgrid, dx),
        dk1_norm: dk1,
        dk2_norm: dk2,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_micro_macro(
    scenario: &Scenario,
    grid: &SpatialGrid,
    vgrid: &VelocityGrid,
    op: &CollisionOperatorSg,
    mut state: StateSg,
    dmat: Option<&DMatrix<f64>>,
    t_end: f64,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StateSg),
) -> Result<RunOutput> {
    let eps = scenario.epsilon;
    let dt_rule = opts.dt.unwrap_or_else(|| {
        micromacro_dt(grid, vgrid, eps, scenario.kernel.sigma_min, scenario.cfl)
    });
    let (steps, dt) = fit_steps(t_end, dt_rule);
    let dx = grid.dx();
    let initial_mass = state.mass(dx);
    let mut diagnostics = vec![micro_macro_row(&state, vgrid, dx, dmat)];
    observer(&state);
    if steps > 0 {
        let stepper = MicroMacroStepper::new(op, vgrid, *grid, eps, dt)?;
        for n in 1..=steps {
            stepper.step(&mut state, n)?;
            if n == steps {
                state.t = t_end;
            }
            observer(&state);
            if n % scenario.diag_every == 0 || n == steps {
                diagnostics.push(micro_macro_row(&state, vgrid, dx, dmat));
            }
        }
    }
    let final_mass = state.mass(dx);
    let out = RunOutput {
        state: FinalState::MicroMacro(state),
        diagnostics,
        discretization: Discretization {
            nx: grid.nx(),
            nv: vgrid.len(),
            length: grid.length(),
            eps,
            dt,
            steps,
            t_end,
        },
        initial_mass,
        final_mass,
    };
    check_mass(&out)?;
    Ok(out)
}

fn resolved_row(state: &ResolvedState, vgrid: &VelocityGrid, dx: f64) -> DiagnosticsRow {
    let rho = state.density(vgrid);
    let nv = state.nv;
    let mut total = 0.0;
    let mut defect = 0.0;
    for x in 0..state.nx {
        let h = &state.h[x * nv..(x + 1) * nv];
        for (i, w) in vgrid.weights().iter().enumerate() {
            total += dx * w * h[i] * h[i];
            defect += dx * w * (h[i] - rho[x]).powi(2);
        }
    }
    DiagnosticsRow {
        t: state.t,
        mass_mode0: dx * rho.iter().sum::<f64>(),
        gamma_norm: total.sqrt(),
        defect_norm: defect.sqrt(),
        dk1_norm: 0.0,
        dk2_norm: 0.0,
    }
}

fn run_resolved(
    scenario: &Scenario,
    grid: &SpatialGrid,
    vgrid: &VelocityGrid,
    z: f64,
    t_end: f64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let eps = scenario.epsilon;
    let dt_rule = opts
        .dt
        .unwrap_or_else(|| resolved_dt_limit(grid, vgrid, eps, scenario.kernel.sigma_max));
    let (steps, dt) = fit_steps(t_end, dt_rule);
    let dx = grid.dx();
    let mut state = ResolvedState::initial(&scenario.init, grid, vgrid, z, eps);
    let initial_mass = vec![dx * state.density(vgrid).iter().sum::<f64>()];
    let mut diagnostics = vec![resolved_row(&state, vgrid, dx)];
    if steps > 0 {
        let op = CollisionOperatorColloc::new(&scenario.kernel, vgrid, z);
        let stepper =
            ResolvedStepper::new(&op, vgrid, *grid, eps, dt, scenario.kernel.sigma_max)?;
        for n in 1..=steps {
            stepper.step(&mut state, n)?;
            if n == steps {
                state.t = t_end;
            }
            if n % scenario.diag_every == 0 || n == steps {
                diagnostics.push(resolved_row(&state, vgrid, dx));
            }
        }
    }
    let final_mass = vec![dx * state.density(vgrid).iter().sum::<f64>()];
    let out = RunOutput {
        state: FinalState::Resolved(state),
        diagnostics,
        discretization: Discretization {
            nx: grid.nx(),
            nv: vgrid.len(),
            length: grid.length(),
            eps,
            dt,
            steps,
            t_end,
        },
        initial_mass,
        final_mass,
    };
    check_mass(&out)?;
    Ok(out)
}

fn check_mass(out: &RunOutput) -> Result<()> {
    let drift = out.mass_drift();
    if drift > MASS_TOLERANCE {
        return Err(Error::Conservation(format!(
            "per-mode mass drifted by {drift:e} (relative)"
        )));
    }
    Ok(())
}
