use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("intent verification failed: {0}")]
    Verification(String),

    #[error("no usable training data: {0}")]
    TrainingData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("bad index file: {0}")]
    Format(String),

    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        report: Box<crate::trainer::TrainReport>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used by the CLI when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Verification(_) => "verification",
            Error::TrainingData(_) => "training-data",
            Error::Numerical(_) | Error::Diverged { .. } => "numerical",
            Error::Format(_) => "format",
        }
    }
}
