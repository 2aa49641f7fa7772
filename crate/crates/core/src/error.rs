use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid config: {0}")]
    InvalidGrid(String),

    #[error("terminal state has no actions")]
    TerminalHasNoActions,

    #[error("invalid action {action} at state {state}")]
    InvalidAction { state: String, action: String },

    #[error("reward requested for non-terminal state {0}")]
    NotTerminal(String),

    #[error("initial state has no parents")]
    InitialHasNoParents,

    #[error("grid too large for exhaustive enumeration (H={side}, limit {limit})")]
    TooLarge { side: usize, limit: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("trajectory exceeded {0} transitions")]
    TrajectoryTooLong(usize),

    #[error("non-positive reward {0} in log-space objective")]
    NonPositiveReward(f64),

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at update {update}: {snapshot}")]
    Diverged { update: usize, snapshot: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
