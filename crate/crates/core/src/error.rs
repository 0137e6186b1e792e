use thiserror::Error;

use crate::corpus::DataError;
use crate::influence::InfluenceError;
use crate::llm::LlmError;
use crate::recmodel::ModelError;
use crate::rerank::RerankError;
use crate::textenc::EncodeError;
use crate::top::TreeError;

pub type Result<T> = std::result::Result<T, Error>;

/// Top-level error. Each stage keeps its own error type; this enum only
/// aggregates them so the pipeline can map failures to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 backend, 5 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Encode(_) | Error::Io { .. } => 3,
            Error::Llm(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Tree(TreeError::Llm(_)) => 4,
            Error::Tree(TreeError::Io { .. }) => 3,
            Error::Tree(_)
            | Error::Model(_)
            | Error::Influence(_)
            | Error::Rerank(_)
            | Error::Invariant(_) => 5,
        }
    }
}
