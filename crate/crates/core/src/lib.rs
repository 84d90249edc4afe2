//! Numerical laboratory for periodic homogenization with sparse, dyadically
//! placed defects.
//!
//! The crate is organised around the objects of the theory:
//!
//! * [`geometry`]: the defect point set, its implicit Voronoi cells and
//!   certified geometric constants.
//! * [`coefficients`]: periodic backgrounds, defect profiles and the perturbed
//!   coefficient `a = a_per + ã`.
//! * [`pde`]: grids, conservative finite-volume operators, preconditioned CG,
//!   spectral periodic solves and norms.
//! * [`corrector`]: periodic and defect correctors, flux potentials.
//! * [`oracle1d`]: closed-form one-dimensional reference solutions.
//! * [`multiscale`]: two-scale expansions and convergence-rate studies.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod corrector;
pub mod error;
pub mod geometry;
pub mod multiscale;
pub mod numeric;
pub mod oracle1d;
pub mod pde;
pub mod quadrature;
pub mod sampling;
pub mod source;

pub use error::{Error, Result};
