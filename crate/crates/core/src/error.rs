use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Each variant maps to a stable short code (see [`Error::code`]) that the CLI
/// prints so scripts can branch on the failure class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("planted spec error: {0}")]
    Spec(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIMENSION",
            Error::Domain(_) => "E_DOMAIN",
            Error::Config(_) => "E_CONFIG",
            Error::Index(_) => "E_INDEX",
            Error::Contract(_) => "E_CONTRACT",
            Error::Evaluation(_) => "E_EVALUATION",
            Error::Io { .. } => "E_IO",
            Error::Format(_) => "E_FORMAT",
            Error::EmptyCorpus(_) => "E_EMPTY_CORPUS",
            Error::Split(_) => "E_SPLIT",
            Error::Episode(_) => "E_EPISODE",
            Error::Sampling(_) => "E_SAMPLING",
            Error::Training(_) => "E_TRAINING",
            Error::Compatibility(_) => "E_COMPATIBILITY",
            Error::Spec(_) => "E_SPEC",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
