//! Finite-volume discretisation of `-div(a ∇u)` on uniform grids, with
//! preconditioned CG, spectral periodic Poisson solves, norms and dumps.

pub mod csr;
pub mod dump;
pub mod grid;
pub mod multigrid;
pub mod norms;
pub mod operator;
pub mod solver;
pub mod spectral;

pub use grid::{Bc, GridField, UniformGrid};
pub use norms::{face_h1_seminorm, gradient, l2_norm_on, norms_and_gradient, NormReport};
pub use operator::{assemble_divform, face_gradient, rhs_div, DivFormSystem, FluxField};
pub use solver::{solve, Preconditioner, SolveReport, Solver, SolverConfig};
pub use spectral::poisson_periodic_spectral;
