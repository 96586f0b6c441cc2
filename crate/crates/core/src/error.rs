use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("every position is masked; the loss is undefined")]
    EmptyLoss,
    #[error("target id {target} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("backward called on a tape that was already consumed; run a new forward pass")]
    StaleTape,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor '{0}' is frozen and cannot accumulate gradients")]
    FrozenTensor(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary (size {vocab})")]
    Vocabulary { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("backbone must be frozen before it can be wrapped")]
    NotFrozen,
    #[error("model already carries adapters")]
    DoubleWrap,
    #[error("cannot compute a batch context from an empty batch")]
    EmptyContext,
    #[error("context vector has dimension {got}, expected {expected}")]
    ContextShape { expected: usize, got: usize },

    #[error("k-means needs at least k={k} points, got {n}")]
    Infeasible { n: usize, k: usize },
    #[error("non-finite coordinate in point {0}")]
    NonFinitePoint(usize),

    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no validation examples")]
    EmptyValidation,

    #[error("loss became non-finite at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
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
    pub(crate) fn dims(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
