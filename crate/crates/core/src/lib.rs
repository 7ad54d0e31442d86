//! Stochastic Galerkin solver for the linear semiconductor Boltzmann equation
//! with a random anisotropic scattering kernel under diffusive scaling.
//!
//! The random input `z` is discretized by generalized polynomial chaos
//! ([`gpc_basis`]), velocity by Gauss-Hermite quadrature ([`velocity_quadrature`]),
//! and space/time by an asymptotic-preserving micro-macro scheme
//! ([`kinetic_solver`]) whose step size does not degrade as `ε → 0`.

pub mod collision;
pub mod diffusion_limit;
pub mod error;
pub mod gpc_basis;
pub mod harness;
pub mod kinetic_solver;
pub mod metrics;
pub mod velocity_quadrature;

pub use error::{Error, Result};
