use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Batch or label layout does not satisfy an operation's precondition.
    #[error("structure error: {0}")]
    Structure(String),

    #[error("format error in {source_name} at {location}: {message}")]
    Format {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Divergence { .. } => ErrorKind::Numeric,
            Error::Data(_)
            | Error::Structure(_)
            | Error::Format { .. }
            | Error::DivisionByZero(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
