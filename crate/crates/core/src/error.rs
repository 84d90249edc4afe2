use thiserror::Error;

/// Errors raised by the homogenization laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index:?} is not in the admissible index set (C0 = {c0})")]
    NotInIndexSet { index: Vec<i32>, c0: f64 },

    #[error("query at |y| = {norm} needs index shells up to {needed}, but the set is enumerated only up to {bound}")]
    Uncertified { norm: f64, needed: u32, bound: u32 },

    #[error(
        "{count} sampled cell points violate the certified bounding box (first: index {index:?}, point {point:?})"
    )]
    InclusionViolation {
        count: usize,
        index: Vec<i32>,
        point: Vec<f64>,
    },

    #[error("cell of index {index:?} could not be enclosed within the search region")]
    CellNotEnclosed { index: Vec<i32> },

    #[error("ellipticity violated: smallest eigenvalue {eigenvalue} < floor {floor} at {at:?}")]
    Ellipticity { eigenvalue: f64, floor: f64, at: Vec<f64> },

    #[error("solver did not converge in {iterations} iterations (relative residual {best_residual:e})")]
    NotConverged { iterations: usize, best_residual: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unresolved oscillation: {0}")]
    Unresolved(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid field dump: {0}")]
    InvalidDump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
