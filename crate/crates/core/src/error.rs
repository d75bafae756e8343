use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numerical routines and file loaders.
#[derive(Debug, Error)]
pub enum LoesError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("search budget exceeded: {count} subsets requested, budget is {budget}")]
    BudgetExceeded { count: u128, budget: u128 },

    #[error("format error in {path}: {reason}")]
    FormatError { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    ManifestError(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LoesError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LoesError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LoesError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LoesError>;
