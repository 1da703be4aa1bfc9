use std::path::PathBuf;

use branch_core::dataset::DatasetError;
use branch_core::metrics::MetricsError;
use branch_core::uncertainty::UncertaintyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("--{0} is required with this backend")]
    MissingOption(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("post `{post}`: {message}")]
    Run { post: String, message: String },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("unknown post `{0}`")]
    UnknownPost(String),
    #[error(transparent)]
    Output(#[from] std::io::Error),
}

impl ServerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServerError::Io {
            path: path.into(),
            source,
        }
    }
}
