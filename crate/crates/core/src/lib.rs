//! Analytic tip solutions of singular ODEs `dx/dr = V(x, r^2)/r`.
//!
//! The crate computes the unique analytic solution `x(r) = g(r^2)` of a
//! singular initial value problem when the eigenvalues of `A = D_x V(0)`
//! avoid `sigma * N+`, extends it by integrating the regularized autonomous
//! system in `t = ln r`, and ships a complete implementation of the BATS
//! fungal tip-growth model.
//!
//! Modules, bottom-up:
//! - [`tseries`]: truncated multivariate power series.
//! - [`linalg`]: dense LU, rank-revealing solves, real eigenvalues.
//! - [`frobenius`]: resonance check, coefficient recursion, system shift.
//! - [`dynsys`]: Dormand–Prince integration of the autonomous system.
//! - [`bats`]: the tip-growth model.
//! - [`cli`]: the `singode` command-line front end.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bats;
pub mod cli;
pub mod dynsys;
pub mod frobenius;
pub mod linalg;
pub mod tseries;

/// Formats a float with 17 significant digits and a lowercase exponent.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
