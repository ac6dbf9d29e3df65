//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by dataset construction, training, and file I/O.
#[derive(Debug, Error)]
pub enum RoltError {
    /// Class profile violates its preconditions (rho < 1, counts too small, ...).
    #[error("invalid class profile: {0}")]
    InvalidProfile(String),

    /// Transition matrix cannot be built (single class, bad noise level).
    #[error("degenerate transition matrix: {0}")]
    DegenerateTransition(String),

    /// Array shapes or class counts do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A target vector is not on the probability simplex.
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    /// Dataset content violates an invariant (non-finite values, label range).
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// Operation needs ground-truth labels but the dataset has none.
    #[error("ground-truth labels required: {0}")]
    MissingGroundTruth(String),

    /// Training configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A file in a dataset or run directory is malformed.
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RoltError>;
