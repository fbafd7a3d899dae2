use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the extraction, disaggregation and forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("profile extraction failed: {0}")]
    Extraction(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing artifact {}: run `{subcommand}` first", artifact.display())]
    Dependency { artifact: PathBuf, subcommand: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
