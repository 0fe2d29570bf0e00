use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (wrong rank, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("finite-difference probe is non-finite at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("empty gradient-norm history")]
    EmptyHistory,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    Aborted { iteration: usize, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
