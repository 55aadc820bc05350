use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("manifest line {line}: record {id:?} is missing required field `{field}`")]
    MissingField { line: usize, id: String, field: &'static str },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("requested {requested} samples but only {available} are available")]
    Size { requested: usize, available: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sample {sample_id:?}: {provenance} source text is unavailable")]
    Provenance { sample_id: String, provenance: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("translator failure: {0}")]
    Translator(String),

    #[error("experiment gate failed: {0}")]
    Gate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Gate(_) => 3,
            Error::Io { .. } | Error::Translator(_) | Error::Divergence { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
