//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of inputs do not agree (basis vs. parameter vector, mesh vs. model, ...).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A model or dataset violates one of its structural invariants.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Observation or mesh data is malformed (bad indices, sigma <= 0, NaN, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A configuration value is out of range or unknown.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A binary container could not be parsed or written.
    #[error("container error: {0}")]
    Container(String),

    /// Geometry too degenerate to proceed (collinear keypoints, zero-area data, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// The optimizer produced a non-finite energy; names the offending term.
    #[error("non-finite energy in term {term} at iteration {iteration}")]
    NonFiniteEnergy { term: &'static str, iteration: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
