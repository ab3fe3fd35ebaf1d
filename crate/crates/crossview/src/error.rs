use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("axis extent is zero")]
    EmptyAxis,

    #[error("drop probability must lie in [0, 1), got {0}")]
    InvalidDropProbability(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token sequence is empty")]
    EmptySentence,

    #[error("token id {id} outside vocabulary of size {size}")]
    TokenIdOutOfRange { id: usize, size: usize },

    #[error("relation id {id} outside relation vocabulary of size {size}")]
    RelationOutOfRange { id: usize, size: usize },

    #[error("gold label id {id} out of range for {classes} classes")]
    LabelOutOfRange { id: usize, classes: usize },

    #[error("token {index} has itself as head")]
    SelfLoopHead { index: usize },

    #[error("head index {head} out of range for sentence of length {len}")]
    HeadOutOfRange { head: usize, len: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown view name '{0}'")]
    UnknownView(String),

    #[error("unknown config keys: {0}")]
    UnknownConfigKeys(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset '{0}' has no examples")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
