use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate station id `{0}`")]
    DuplicateStation(String),

    #[error("unknown station id `{0}`")]
    UnknownStation(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported request: {0}")]
    Unsupported(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientData(msg.into())
    }

    /// True for errors that originate in a numerical routine rather than in
    /// the inputs or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NotPositiveDefinite(_)
                | Error::NonConvergence(_)
                | Error::Numerical(_)
        )
    }
}
