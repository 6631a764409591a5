use std::path::PathBuf;

/// Errors raised across the solver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid bandwidth {0}: must be finite and positive")]
    InvalidBandwidth(f64),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown forward operator `{0}`")]
    UnknownOperator(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than by a failure
    /// during execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidBandwidth(_)
                | Error::InvalidSpec(_)
                | Error::UnknownOperator(_)
                | Error::Config(_)
                | Error::Empty(_)
                | Error::DegenerateData(_)
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
