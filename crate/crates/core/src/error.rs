use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code taxonomy: data errors (`Domain`,
/// `Contract`, `Parse`, `Record`) exit 1, `Io` exits 2, `MissingStage`
/// exits 3, and `Numeric`/`Training` exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside a documented domain.
    #[error("{0}")]
    Domain(String),
    /// An API contract was violated (shape mismatch, empty input, ...).
    #[error("{0}")]
    Contract(String),
    /// An input line failed to parse.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A single record inside a batch failed.
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Numerical failure (non-finite value, non-PSD covariance, ...).
    #[error("{0}")]
    Numeric(String),
    /// Training diverged or a freeze contract was broken.
    #[error("{0}")]
    Training(String),
    /// A pipeline stage ran before its upstream artifact existed.
    #[error("missing upstream artifact: {0}")]
    MissingStage(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
