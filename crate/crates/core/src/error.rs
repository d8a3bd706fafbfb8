use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid student spec: {0}")]
    InvalidSpec(String),

    #[error("invalid stage schedule: {0}")]
    InvalidSchedule(String),

    #[error("stage index {stage} out of range 1..={num_stages}")]
    StageOutOfRange { stage: usize, num_stages: usize },

    #[error("cannot advance: model is already at the final stage {0}")]
    AlreadyFinal(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("channel mismatch: last block emits {block} channels but decoder expects {decoder}")]
    ChannelMismatch { block: usize, decoder: usize },

    #[error("invalid partition request: {0}")]
    InvalidPartition(String),

    #[error("subset index {index} out of range 1..={count}")]
    SubsetOutOfRange { index: usize, count: usize },

    #[error("invalid loss input: {0}")]
    InvalidLoss(String),

    #[error("no teacher registered for subset {0}")]
    MissingTeacher(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("state dict mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    StateDictMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("logit store rejected: {0}")]
    StoreIntegrity(String),

    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step}; diagnostic checkpoint at {checkpoint}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        step: usize,
        checkpoint: PathBuf,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metrics log: {0}")]
    Metrics(String),

    #[error("stage {stage}, epoch {epoch}: {source}")]
    AtEpoch {
        stage: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path} not found: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("{path} is held by running process {pid}; use a distinct run_id")]
    Locked { path: PathBuf, pid: u32 },

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

    pub(crate) fn at(self, stage: usize, epoch: usize) -> Self {
        match self {
            already @ Error::AtEpoch { .. } => already,
            other => Error::AtEpoch {
                stage,
                epoch,
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by the configuration rather than by the run.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidSpec(_)
            | Error::InvalidSchedule(_)
            | Error::InvalidPartition(_)
            | Error::Config(_)
            | Error::ChannelMismatch { .. } => true,
            Error::AtEpoch { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
