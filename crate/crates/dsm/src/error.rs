//! Library-wide error type.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point cloud with zero points was supplied where at least one is required.
    #[error("point cloud must contain at least one point")]
    EmptyCloud,

    /// A non-finite coordinate or value was encountered in input data.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A rotation matrix failed the orthonormality / determinant check.
    #[error("invalid rotation matrix: {reason}")]
    InvalidRotation { reason: String },

    /// Generic precondition violation (sizes, ranges, counts).
    #[error("{0}")]
    InvalidArgument(String),

    /// Parse failure in a text format, with file and line for diagnosis.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A manifest referenced an entry that does not resolve.
    #[error("manifest entry `{entry}`: {message}")]
    ManifestEntry { entry: String, message: String },

    /// Tensor shape mismatch, reported with the layer that detected it.
    #[error("shape mismatch in {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// RANSAC could not assemble a minimal consensus set.
    #[error("registration failed: best consensus has {inliers} inliers (need >= 3)")]
    RegistrationFailed { inliers: usize },

    /// Correspondence geometry too degenerate for a rigid fit.
    #[error("degenerate correspondence set: {reason}")]
    DegenerateGeometry { reason: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    /// Too many frames failed to register; the run is not salvageable.
    #[error("modeling aborted: {failed} of {total} frames failed to register")]
    TooManyFailures { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
