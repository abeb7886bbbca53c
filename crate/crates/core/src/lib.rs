//! Fundamental solution of the heat equation on the half-space
//! `Ω = R^{N-1} × (0, ∞)` with the dynamical boundary condition
//! `∂_t u + ∂_ν u = 0`, and the numerical experiments built on it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod quadrature;
pub mod semigroup;
pub mod semilinear;

pub use error::{Error, Result};
