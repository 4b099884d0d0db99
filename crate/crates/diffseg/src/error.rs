//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: configuration and
//! shape problems are usage-class errors, data/model/io problems are
//! runtime-class errors, and [`Error::Internal`] marks states that should
//! be unreachable when the public contracts are honored.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented range or relation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A timestep lies outside the valid range for the operation.
    #[error("timestep {t} out of range {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input data violates a documented invariant (range, encoding, size).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A dataset directory or sample file is missing or malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A checkpoint file is malformed or truncated.
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// A stored payload does not match its recorded digest.
    #[error("digest mismatch for {path}: stored {stored}, computed {computed}")]
    DigestMismatch {
        path: String,
        stored: String,
        computed: String,
    },

    /// A metric is undefined for the given inputs (e.g. constant volumes).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// A state that the crate's own logic should have made unreachable.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Wrap an I/O error with the path it occurred at.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap a JSON error with the context it occurred in.
    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Shape-mismatch helper taking any shape slices.
    pub fn shapes(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
