//! Gauss-Hermite discretization of velocity space.
//!
//! Velocity-dependent fields are stored in h-representation, `h = f / M`,
//! sampled at the nodes. Then `∫ f dv = Σ ω_i h_i` and
//! `∫ f² / M dv = Σ ω_i h_i²`, so the Maxwellian is never evaluated.

use crate::error::{Error, Result};
use crate::gpc_basis::{gauss_rule, PolynomialFamily};

/// Gauss rule of order `Nv` for the weight `M(v)`, weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl VelocityGrid {
    pub fn new(nv: usize) -> Result<Self> {
        if nv < 2 {
            return Err(Error::InvalidArgument(format!(
                "velocity grid needs at least 2 nodes, got {nv}"
            )));
        }
        let rule = gauss_rule(PolynomialFamily::HermiteGaussian, nv)?;
        Ok(Self {
            nodes: rule.nodes,
            weights: rule.weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest node magnitude.
    pub fn v_max(&self) -> f64 {
        self.nodes.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `Σ_i ω_i h_i`, the density of the field.
    pub fn density(&self, h: &[f64]) -> f64 {
        self.weights.iter().zip(h).map(|(w, h)| w * h).sum()
    }

    /// `Σ_i ω_i v_i^p h_i`, summed over mirror pairs `(v_i, −v_i)` so that odd
    /// moments of even fields cancel exactly.
    pub fn moment(&self, h: &[f64], p: u32) -> f64 {
        let n = self.len();
        let term = |i: usize| self.weights[i] * self.nodes[i].powi(p as i32) * h[i];
        let mut acc = 0.0;
        for i in 0..n / 2 {
            acc += term(i) + term(n - 1 - i);
        }
        if n % 2 == 1 {
            acc += term(n / 2);
        }
        acc
    }

    /// Moment of the Maxwellian itself.
    pub fn maxwellian_moment(&self, p: u32) -> f64 {
        self.moment(&vec![1.0; self.len()], p)
    }

    /// `T = ∫ v² M dv` under the rule.
    pub fn second_moment(&self) -> f64 {
        self.maxwellian_moment(2)
    }

    /// h-representation of `Πf = M ∫ f dv`: the constant vector `ρ`.
    pub fn pi_project(&self, h: &[f64]) -> Vec<f64> {
        vec![self.density(h); h.len()]
    }

    /// Applies `Π` to a node-major block `h[i * k + m]` independently per mode `m`.
    pub fn pi_project_modes(&self, h: &[f64], k: usize) -> Vec<f64> {
        let rho = self.densities(h, k);
        let mut out = Vec::with_capacity(h.len());
        for _ in 0..self.len() {
            out.extend_from_slice(&rho);
        }
        out
    }

    /// Per-mode densities of a node-major block `h[i * k + m]`.
    pub fn densities(&self, h: &[f64], k: usize) -> Vec<f64> {
        let mut rho = vec![0.0; k];
        for (i, w) in self.weights.iter().enumerate() {
            for m in 0..k {
                rho[m] += w * h[i * k + m];
            }
        }
        rho
    }

    /// In-place `(I − Π)` on a node-major block, per mode.
    pub fn remove_equilibrium(&self, h: &mut [f64], k: usize) {
        let rho = self.densities(h, k);
        for i in 0..self.len() {
            for m in 0..k {
                h[i * k + m] -= rho[m];
            }
        }
    }

    /// `Σ_i ω_i a_i b_i`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }
}
