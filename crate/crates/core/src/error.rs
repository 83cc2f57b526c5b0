use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or config value failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every agent died in the same step.
    #[error("population went extinct at step {step}")]
    Extinction { step: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("could not parse config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("could not serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than by running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Toml(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
