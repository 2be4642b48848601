use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{id}` ({first} and {second})")]
    DuplicateId {
        id: String,
        first: String,
        second: String,
    },

    #[error("unknown knowledge id `{0}`")]
    UnknownKnowledge(String),

    #[error("unknown application id `{0}`")]
    UnknownApplication(String),

    #[error("invalid record: {0}")]
    Invalid(String),

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("provider unavailable after {attempts} attempts: {message}")]
    ProviderUnavailable { attempts: u32, message: String },

    #[error("replay miss for fingerprint {0}")]
    ReplayMiss(String),

    #[error("provider rejected request: {0}")]
    ProviderRejected(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the model provider itself, as opposed to bad
    /// input. Long-running jobs stop and checkpoint on these.
    pub fn is_provider_outage(&self) -> bool {
        matches!(
            self,
            Error::ProviderUnavailable { .. } | Error::ReplayMiss(_) | Error::ProviderRejected(_)
        )
    }
}
