use std::path::PathBuf;

use crate::bytes::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] dualvit_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    /// The checkpoint was written for a different model.
    #[error("checkpoint config mismatch at `{field}`: checkpoint has {found}, target model has {expected}")]
    ConfigMismatch { field: String, expected: String, found: String },
    /// First checkpoint entry that does not fit the target model.
    #[error("checkpoint entry `{name}`: {problem}")]
    Entry { name: String, problem: String },
    #[error("cannot encode: {0}")]
    Encode(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
