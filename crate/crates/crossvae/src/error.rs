use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::vten::VtenError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Vten { path: PathBuf, source: VtenError },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    /// A model-side failure, tagged with the stage that hit it.
    #[error("{source}")]
    Core { module: &'static str, source: crossvae_core::Error },
    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    /// Name of the component that failed, as shown by the command line.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Vten { .. } | Error::Checkpoint { .. } | Error::Dataset(_) | Error::Json { .. } => "data_io",
            Error::Core { module, .. } => module,
            Error::Eval(_) => "metrics_eval",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Error {
        Error::Checkpoint { path: path.into(), message: message.into() }
    }
}

/// Attaches a module name to core errors.
pub(crate) trait Within<T> {
    fn within(self, module: &'static str) -> Result<T>;
}

impl<T> Within<T> for crossvae_core::Result<T> {
    fn within(self, module: &'static str) -> Result<T> {
        self.map_err(|source| Error::Core { module, source })
    }
}
