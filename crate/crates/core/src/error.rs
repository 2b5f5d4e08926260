use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty rule dataset")]
    EmptyDataset,

    #[error("sentence exceeds max_len {max_len}: line {line}")]
    SentenceTooLong { line: usize, max_len: usize },

    #[error("corpus files are not aligned: {0}")]
    CorpusMisaligned(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("non-finite gradient at {at}")]
    NonFiniteGradient { at: String },

    #[error("method {method} does not score the {side} side for {model}")]
    UnsupportedSide {
        method: &'static str,
        side: &'static str,
        model: &'static str,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("rule dataset meta mismatch: {0}")]
    MetaMismatch(String),

    #[error("provenance unavailable: {0}")]
    ProvenanceUnavailable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
