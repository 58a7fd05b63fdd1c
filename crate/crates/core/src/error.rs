use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse network configuration: {0}")]
    Parse(String),

    /// A configuration or domain invariant does not hold.
    #[error("invalid `{field}`: {rule}")]
    Invariant { field: String, rule: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("polytope has no feasible point")]
    Infeasible,

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("model is not trained: {0}")]
    NotTrained(&'static str),

    #[error("dataset unusable: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            rule: rule.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
