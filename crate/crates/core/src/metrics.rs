//! Γ-type energy norms, the local-equilibrium defect, and the stochastic
//! Galerkin error against a collocation reference.
//!
//! A micro-macro state represents `h = ρ + ε g` with `ρ` at cell centers and
//! `g` at interfaces. Because `Σ_i ω_i g_i = 0`, the cross term of `|ρ + εg|²`
//! integrates to zero and
//!
//! `‖f‖²_Γ = Δx Σ_x Σ_k ρ̂²_{x,k} + ε² Δx Σ_x Σ_i ω_i Σ_k ĝ²_{x,i,k}`.
//!
//! Every norm here is therefore a weighted sum of squares over the flat vector
//! `(ρ̂_{·,k}, ĝ_{·,·,k})` of each mode.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpc_basis::{gauss_rule, GpcBasis, PolynomialFamily, QuadratureRule};
use crate::kinetic_solver::{run_with, Discretization, RunOptions, Scenario, Scheme, StateSg};
use crate::velocity_quadrature::VelocityGrid;

/// Default order of the reference collocation rule.
pub const DEFAULT_Q_REF: usize = 40;

/// Per-entry weights of the flat mode vector `[ρ̂ (nx), ĝ (nx·nv)]`.
pub fn mode_weights(nx: usize, vgrid: &VelocityGrid, dx: f64, eps: f64) -> Vec<f64> {
    let mut w = vec![dx; nx];
    for _ in 0..nx {
        w.extend(vgrid.weights().iter().map(|o| eps * eps * dx * o));
    }
    w
}

/// Flat vector of mode `m`: `ρ̂_{x,m}` for every cell, then `ĝ_{x,i,m}` interface-major.
pub fn mode_vector(state: &StateSg, m: usize) -> Vec<f64> {
    let k = state.k;
    let mut out: Vec<f64> = (0..state.nx).map(|x| state.rho[x * k + m]).collect();
    out.extend((0..state.nx * state.nv).map(|r| state.g[r * k + m]));
    out
}

fn weighted_sq(w: &[f64], u: &[f64]) -> f64 {
    w.iter().zip(u).map(|(w, u)| w * u * u).sum()
}

/// `Σ_k Σ_x Δx ρ̂² + ε² Δx Σ_k Σ_x Σ_i ω_i ĝ²` for arbitrary mode arrays.
fn split_sq(rho: &[f64], g: &[f64], k: usize, vgrid: &VelocityGrid, dx: f64, eps: f64) -> f64 {
    let nv = vgrid.len();
    let rho_sq: f64 = rho.iter().map(|r| r * r).sum();
    let mut g_sq = 0.0;
    for (r, chunk) in g.chunks(k).enumerate() {
        let w = vgrid.weights()[r % nv];
        g_sq += w * chunk.iter().map(|v| v * v).sum::<f64>();
    }
    dx * rho_sq + eps * eps * dx * g_sq
}

/// `‖f‖_Γ` of a micro-macro state.
pub fn gamma_norm(state: &StateSg, vgrid: &VelocityGrid, dx: f64) -> f64 {
    split_sq(&state.rho, &state.g, state.k, vgrid, dx, state.eps).sqrt()
}

/// `‖Πf − f‖_Γ = ε ‖g‖_Γ`.
pub fn defect_norm(state: &StateSg, vgrid: &VelocityGrid, dx: f64) -> f64 {
    split_sq(&[], &state.g, state.k, vgrid, dx, state.eps).sqrt()
}

/// Applies a `K×K` matrix to every mode block of a node-major array.
fn apply_modes(mat: &DMatrix<f64>, data: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(k).zip(out.chunks_mut(k)) {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += mat[(j, l)] * src[l];
            }
            dst[j] = acc;
        }
    }
    out
}

fn matrix_power(d: &DMatrix<f64>, order: u32) -> DMatrix<f64> {
    let mut p = DMatrix::identity(d.nrows(), d.ncols());
    for _ in 0..order {
        p = d * p;
    }
    p
}

/// `‖D^k f‖_Γ` using a precomputed derivative matrix.
pub fn dk_norm_with(
    state: &StateSg,
    vgrid: &VelocityGrid,
    dx: f64,
    dmat: &DMatrix<f64>,
    order: u32,
) -> f64 {
    let p = matrix_power(dmat, order);
    let rho = apply_modes(&p, &state.rho, state.k);
    let g = apply_modes(&p, &state.g, state.k);
    split_sq(&rho, &g, state.k, vgrid, dx, state.eps).sqrt()
}

/// `‖D^k f‖_Γ`, the z-derivative of order `k` taken on the gPC modes.
pub fn dk_norm(state: &StateSg, basis: &GpcBasis, vgrid: &VelocityGrid, dx: f64, order: u32) -> f64 {
    dk_norm_with(state, vgrid, dx, &basis.z_derivative_matrix(), order)
}

/// `‖f‖_{Γᵏ} = (Σ_{j≤k} ‖D^j f‖²_Γ)^{1/2}`.
pub fn gamma_k_norm(state: &StateSg, basis: &GpcBasis, vgrid: &VelocityGrid, dx: f64, k: u32) -> f64 {
    let d = basis.z_derivative_matrix();
    (0..=k)
        .map(|j| dk_norm_with(state, vgrid, dx, &d, j).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `‖D^k(v ∂ₓ f)‖_Γ`, evaluated at interfaces with centered differences:
/// `v_i [(ρ_{s+1} − ρ_s)/Δx + ε (g_{s+1} − g_{s−1})/(2Δx)]`.
pub fn transport_dk_norm(
    state: &StateSg,
    vgrid: &VelocityGrid,
    dx: f64,
    dmat: &DMatrix<f64>,
    order: u32,
) -> f64 {
    let (nx, nv, k) = (state.nx, state.nv, state.k);
    let n = nv * k;
    let mut field = vec![0.0; nx * n];
    for s in 0..nx {
        let right = (s + 1) % nx;
        let left = (s + nx - 1) % nx;
        let gr = state.g_block(right);
        let gl = state.g_block(left);
        for i in 0..nv {
            let v = vgrid.nodes()[i];
            for m in 0..k {
                let drho = (state.rho[right * k + m] - state.rho[s * k + m]) / dx;
                let dg = (gr[i * k + m] - gl[i * k + m]) / (2.0 * dx);
                field[s * n + i * k + m] = v * (drho + state.eps * dg);
            }
        }
    }
    let p = matrix_power(dmat, order);
    let field = apply_modes(&p, &field, k);
    let mut sq = 0.0;
    for (r, chunk) in field.chunks(k).enumerate() {
        sq += vgrid.weights()[r % nv] * chunk.iter().map(|v| v * v).sum::<f64>();
    }
    (dx * sq).sqrt()
}

/// Micro-macro solutions at the nodes of a reference rule in `z`.
#[derive(Debug, Clone)]
pub struct CollocationEnsemble {
    pub family: PolynomialFamily,
    pub rule: QuadratureRule,
    pub samples: Vec<StateSg>,
    pub discretization: Discretization,
    pub vgrid: VelocityGrid,
}

impl CollocationEnsemble {
    /// Runs `MicroMacroColloc` at every node of the order-`q_ref` rule.
    pub fn run(
        scenario: &Scenario,
        q_ref: usize,
        t_end: f64,
        opts: &RunOptions,
        parallel: bool,
    ) -> Result<Self> {
        scenario.validate()?;
        let rule = gauss_rule(scenario.z_family, q_ref)?;
        let node_opts = RunOptions {
            skip_validation: true,
            ..*opts
        };
        let solve = |z: &f64| {
            run_with(scenario, Scheme::MicroMacroColloc { z: *z }, t_end, &node_opts)
        };
        let outputs: Vec<_> = if parallel {
            rule.nodes.par_iter().map(solve).collect::<Result<_>>()?
        } else {
            rule.nodes.iter().map(solve).collect::<Result<_>>()?
        };
        let discretization = outputs[0].discretization;
        let samples = outputs
            .into_iter()
            .map(|o| o.micro_macro().cloned().expect("micro-macro output"))
            .collect();
        Ok(Self {
            family: scenario.z_family,
            rule,
            samples,
            discretization,
            vgrid: scenario.velocity_grid()?,
        })
    }

    /// Builds an ensemble from given samples (each with `K = 1`).
    pub fn from_samples(
        family: PolynomialFamily,
        rule: QuadratureRule,
        samples: Vec<StateSg>,
        discretization: Discretization,
        vgrid: VelocityGrid,
    ) -> Result<Self> {
        if samples.len() != rule.len() {
            return Err(Error::Mismatch(format!(
                "{} samples for a {}-point rule",
                samples.len(),
                rule.len()
            )));
        }
        if samples.iter().any(|s| s.k != 1) {
            return Err(Error::Mismatch("ensemble samples must have a single mode".into()));
        }
        Ok(Self {
            family,
            rule,
            samples,
            discretization,
            vgrid,
        })
    }

    fn weights(&self) -> Vec<f64> {
        mode_weights(
            self.discretization.nx,
            &self.vgrid,
            self.discretization.length / self.discretization.nx as f64,
            self.discretization.eps,
        )
    }

    /// `(∫ ‖f(z)‖²_{Γ,x,v} π dz)^{1/2}` by the reference rule.
    pub fn gamma_norm(&self) -> f64 {
        let w = self.weights();
        self.rule
            .weights
            .iter()
            .zip(&self.samples)
            .map(|(wq, s)| wq * weighted_sq(&w, &mode_vector(s, 0)))
            .sum::<f64>()
            .sqrt()
    }

    /// Coefficients of `P_K f`, mode-major: entry `j` is the flat vector of `⟨f, ψ_j⟩_π`.
    pub fn project(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        let basis = GpcBasis::new(self.family, k, self.rule.len())?;
        let len = self.samples[0].nx * (1 + self.samples[0].nv);
        let mut coeffs = vec![vec![0.0; len]; k];
        for (q, s) in self.samples.iter().enumerate() {
            let u = mode_vector(s, 0);
            let wq = self.rule.weights[q];
            let psi = basis.eval(self.rule.nodes[q]);
            for (j, c) in coeffs.iter_mut().enumerate() {
                let f = wq * psi[j];
                for (c, u) in c.iter_mut().zip(&u) {
                    *c += f * u;
                }
            }
        }
        Ok(coeffs)
    }
}

/// `‖f − f_K‖_Γ` and its split into `R_K = f − P_K f` and `e_K = P_K f − f_K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgError {
    pub total: f64,
    pub projection: f64,
    pub galerkin: f64,
}

fn check_match(a: &Discretization, b: &Discretization) -> Result<()> {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-13 * x.abs().max(y.abs()).max(1e-300);
    let same = a.nx == b.nx
        && a.nv == b.nv
        && a.steps == b.steps
        && close(a.dt, b.dt)
        && close(a.eps, b.eps)
        && close(a.t_end, b.t_end)
        && close(a.length, b.length);
    if same {
        Ok(())
    } else {
        Err(Error::Mismatch(format!("SG run {a:?} vs ensemble {b:?}")))
    }
}

/// Error of a gPC solution against a matched collocation ensemble.
pub fn sg_error(
    sg: &StateSg,
    sg_disc: &Discretization,
    ensemble: &CollocationEnsemble,
) -> Result<SgError> {
    check_match(sg_disc, &ensemble.discretization)?;
    let k = sg.k;
    if ensemble.rule.len() < k {
        return Err(Error::QuadOrderTooSmall {
            k,
            quad_order: ensemble.rule.len(),
        });
    }
    let basis = GpcBasis::new(ensemble.family, k, ensemble.rule.len())?;
    let w = ensemble.weights();
    let modes: Vec<Vec<f64>> = (0..k).map(|m| mode_vector(sg, m)).collect();
    let coeffs = ensemble.project(k)?;

    let mut total = 0.0;
    let mut projection = 0.0;
    for (q, s) in ensemble.samples.iter().enumerate() {
        let u = mode_vector(s, 0);
        let psi = basis.eval(ensemble.rule.nodes[q]);
        let mut r_sg = u.clone();
        let mut r_pk = u;
        for j in 0..k {
            for p in 0..r_sg.len() {
                r_sg[p] -= psi[j] * modes[j][p];
                r_pk[p] -= psi[j] * coeffs[j][p];
            }
        }
        let wq = ensemble.rule.weights[q];
        total += wq * weighted_sq(&w, &r_sg);
        projection += wq * weighted_sq(&w, &r_pk);
    }
    let galerkin: f64 = (0..k)
        .map(|j| {
            let diff: Vec<f64> = coeffs[j].iter().zip(&modes[j]).map(|(c, f)| c - f).collect();
            weighted_sq(&w, &diff)
        })
        .sum();
    Ok(SgError {
        total: total.sqrt(),
        projection: projection.sqrt(),
        galerkin: galerkin.sqrt(),
    })
}
