use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the probing toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid knowledge base: {0}")]
    Kb(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend unavailable at {url}: {message}")]
    BackendUnavailable { url: String, message: String },

    #[error("sequence of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("position {position} out of range for a prompt of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("layer {layer} out of range (model has {num_layers} layers)")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("prompt construction failed: {0}")]
    Prompt(String),

    #[error("token alignment failed: {0}")]
    Alignment(String),

    #[error("missing activation record for {0}")]
    MissingRecord(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("activation store: {0}")]
    Store(String),

    #[error("frequency provider: {0}")]
    Frequency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
