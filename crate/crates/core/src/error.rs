use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class name is empty after normalization")]
    EmptyName,

    #[error("registry is invalid: {0}")]
    Registry(String),

    #[error("prompt template error: {0}")]
    Template(String),

    #[error("target class {0:?} is not in the class list")]
    UnknownTarget(String),

    #[error("llm call failed for class {class:?} in round {round}: {source}")]
    Simulation {
        class: String,
        round: usize,
        #[source]
        source: BackendError,
    },

    #[error("simulation failed for {} class(es); {} classes recovered", failures.len(), partial.len())]
    PartialSimulation {
        failures: Vec<(String, String)>,
        partial: crate::model::ClassRegistry,
    },

    #[error("expected {expected} descriptions for class {class:?}, got {got}")]
    DescriptionShortfall {
        class: String,
        expected: usize,
        got: usize,
    },

    #[error("backend error ({context}): {source}")]
    Backend {
        context: String,
        #[source]
        source: BackendError,
    },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("feature store error: {0}")]
    Store(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("split {split} failed: {message}")]
    PartialProtocol {
        split: usize,
        message: String,
        report: Box<crate::eval::MetricsReport>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(context: impl Into<String>, source: BackendError) -> Self {
        Error::Backend {
            context: context.into(),
            source,
        }
    }

    /// True for failures that originate in a remote provider rather than local input.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Backend { .. } | Error::Simulation { .. } | Error::PartialSimulation { .. }
        )
    }

    /// Process exit status: 1 config or input error, 2 backend error, 3 partial failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PartialSimulation { .. } | Error::PartialProtocol { .. } => 3,
            e if e.is_backend() => 2,
            _ => 1,
        }
    }
}
