use thiserror::Error;

use crate::patterns::ShardSpec;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("cycle detected: edge {from} -> {to} closes a cycle")]
    Cycle { from: String, to: String },

    #[error("node `{node}` references unknown input `{input}`")]
    DanglingRef { node: String, input: String },

    #[error("duplicate node name `{0}`")]
    DuplicateName(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is empty after trimming auxiliary nodes")]
    EmptyGraph,

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("pattern `{pattern}` expects inputs {expected:?}, got {actual:?}")]
    SpecMismatch {
        pattern: String,
        expected: Vec<ShardSpec>,
        actual: Vec<ShardSpec>,
    },

    #[error("no single collective converts {from} into {to}")]
    NoRoute { from: ShardSpec, to: ShardSpec },

    #[error("no valid plan: {0}")]
    NoValidPlan(String),

    #[error("search space of {candidates} candidates exceeds the limit of {limit}")]
    SearchTooLarge { candidates: u128, limit: u128 },

    #[error("node `{node}`: axis {axis} of size {dim} is not divisible by {parts} devices")]
    IndivisibleShard {
        node: String,
        axis: usize,
        dim: usize,
        parts: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("collective protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) | Error::Json(_) => "parse",
            Error::Cycle { .. }
            | Error::DanglingRef { .. }
            | Error::DuplicateName(_)
            | Error::InvalidGraph(_)
            | Error::EmptyGraph => "graph",
            Error::BadConfig(_) => "config",
            Error::SpecMismatch { .. } | Error::NoRoute { .. } => "pattern",
            Error::NoValidPlan(_) | Error::SearchTooLarge { .. } => "plan",
            Error::IndivisibleShard { .. } => "rewrite",
            Error::ShapeMismatch(_) | Error::Protocol(_) => "interpreter",
            Error::Io(_) => "io",
        }
    }
}
