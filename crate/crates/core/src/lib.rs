//! Normalized solutions of the mass-constrained biharmonic Schrödinger equation
//!
//! ```text
//! Δ²u − Δu − λu = μ|u|^{p−2}u + |u|^{4*−2}u,   ∫u² = c,   x ∈ ℝ^N, N ≥ 5
//! ```
//!
//! computed on a radial grid. See the README for an overview of the modules.

pub mod bubbles;
pub mod cli;
pub mod constants;
pub mod error;
pub mod functional;
pub mod grid;
pub mod linalg;
pub mod quadrature;
pub mod solvers;

pub use error::{Error, Result};
