use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("agent mismatch: {0}")]
    Mismatch(String),

    #[error("macro {macro_id} is not initiable for agent {agent}")]
    NotInitiable { agent: usize, macro_id: usize },

    #[error("non-finite value in episode {episode}, agent {agent}, decision {step}: {what}")]
    Numeric {
        episode: usize,
        agent: usize,
        step: usize,
        what: &'static str,
    },

    #[error("thread {thread} (seed {seed:#018x}) failed: {source}")]
    ThreadFailed {
        thread: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by floating point breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::ThreadFailed { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
