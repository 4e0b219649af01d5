//! Forward and inverse spectral toolkit for Iwatsuka magnetic Hamiltonians.
//!
//! The two-dimensional operator `H = -∂x² + (-i∂y - a(x))²` is translation
//! invariant in `y`, so a partial Fourier transform reduces it to the family of
//! one-dimensional fiber operators `h(ξ) = -d²/dx² + (ξ - a(x))²`. Everything in
//! this crate works at the fiber level:
//!
//! - [`fields`]: admissible magnetic profiles `b`, their primitives `a`, and
//!   compactly supported hat-basis perturbations of `a`.
//! - [`spectral`]: finite-difference discretization of `h(ξ)` and a Sturm
//!   bisection / inverse iteration eigensolver ([`tridiag`]).
//! - [`bands`]: band functions `λ_j(ξ)` and the velocity moment
//!   `⟨v φ₁, φ₁⟩` sampled over a `ξ` grid.
//! - [`current`]: the edge-current functional `ϑ(χ)` by several independent
//!   routes, and its time-independence.
//! - [`perturbation`]: resolvent contour projections and the second-order
//!   coefficient of the ground-energy perturbation series.
//! - [`inverse`]: recovery of `λ₁` from current data, of `a` from ground-state
//!   data, and a Levenberg–Marquardt fit of the perturbation.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bands;
pub mod current;
pub mod error;
pub mod export;
pub mod fields;
pub mod inverse;
pub mod perturbation;
pub mod quadrature;
pub mod spectral;
pub mod tridiag;

pub use error::{Error, Result};
