//! Numerical laboratory for the unstable obstacle problem `Δu = f·χ{u>ψ}`.
//!
//! The crate is organised bottom-up:
//!
//! * [`quadform`] – homogeneous quadratic forms on ℝ³ and their `(sign, δ, Q, τ)`
//!   canonical parametrisation.
//! * [`sphere`] – quadrature on S² and real spherical-harmonic expansions.
//! * [`zp`] – the auxiliary log-resonant solutions `Z_p` and the sphere
//!   coefficients `A_x, A_y, A_z, A, κ`.
//! * [`renorm`] – the dyadic renormalisation map on quadratic forms.
//! * [`pde`] – grids, a multigrid-preconditioned Poisson solver and the
//!   damped fixed-point solver for the obstacle equation.
//! * [`blowup`] – projection onto quadratic forms, blow-up sequences,
//!   free-boundary meshes, cone/cross fitting and sublevel-set measures.
//! * [`verify`] – the automated property suite used by `uobs verify` and the
//!   acceptance tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blowup;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pde;
pub mod quadform;
pub mod renorm;
pub mod sphere;
pub mod verify;
pub mod zp;

pub use error::{Error, Result};
pub use quadform::{CanonicalForm, QuadraticForm, Sign};
