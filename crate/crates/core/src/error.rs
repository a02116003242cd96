//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulator and planner.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A plan or partition has no feasible solution.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed input file (CSV import, profile round-trip).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
