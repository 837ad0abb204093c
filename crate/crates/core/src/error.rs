use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("intersection {intersection}: phase {phase} out of range (has {num_phases} phases)")]
    InvalidPhase {
        intersection: usize,
        phase: usize,
        num_phases: usize,
    },

    #[error("simulation already reached its horizon of {0} s")]
    PastHorizon(u32),

    #[error("unknown intersection id {0}")]
    UnknownIntersection(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at update {update}: loss = {loss}")]
    Diverged { update: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
