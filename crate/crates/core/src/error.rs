use crate::ActId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("activation {0} is not resident")]
    NotFound(ActId),
    #[error("activation {0} is already resident")]
    Duplicate(ActId),
    #[error("need {needed} free pages, only {free} available")]
    NoSpace { needed: usize, free: usize },
    #[error("store rejected activation {0}")]
    StoreRejected(ActId),
    #[error("activation {0} is at the minimum bit-width and must be evicted")]
    MustEvict(ActId),
    #[error("nothing to evict")]
    NothingToEvict,
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptData(msg.into())
    }
}
