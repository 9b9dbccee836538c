use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: record {index}: {message}")]
    Schema {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] eqsim::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(path: &Path, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 config/schema, 3 I/O, 4 numeric, 5 shape.
    pub fn exit_code(&self) -> i32 {
        use eqsim::Error as E;
        match self {
            Self::Config { .. } | Self::Schema { .. } => 2,
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::NonFiniteLoss { .. } | E::NonFinite(_) | E::DegenerateVector { .. } | E::BadTemperature(_) => 4,
                E::DimensionMismatch { .. } | E::CountMismatch { .. } | E::LengthMismatch { .. } => 5,
                _ => 2,
            },
        }
    }
}
