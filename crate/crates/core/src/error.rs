use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    InvalidLength { rows: usize, cols: usize, len: usize },
    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rank {rank} outside valid range {min}..={max}")]
    InvalidRank { rank: usize, min: usize, max: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.3e}")]
    NegativeEigenvalue { eigenvalue: f64 },
    #[error("{op} on {rows}x{cols} matrix did not converge within {iterations} iterations")]
    NoConvergence {
        op: &'static str,
        rows: usize,
        cols: usize,
        iterations: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration accumulator is empty")]
    EmptyCalibration,
    #[error("head index {index} out of range (count {count})")]
    HeadOutOfRange { index: usize, count: usize },
    #[error("combinatorial search over C({n}, {k}) subsets exceeds the limit of {limit}")]
    SearchTooLarge { n: usize, k: usize, limit: u64 },
    #[error("budget of {budget} parameters is infeasible (minimum reachable {minimum})")]
    InfeasibleBudget { budget: u64, minimum: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;
