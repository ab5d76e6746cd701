use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty reduction in {0}")]
    EmptyReduction(&'static str),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("benchmark generation failed: {0}")]
    Generation(String),

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint version mismatch: file has {found}, engine reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("training aborted at iteration {iteration} in {stage}: {detail}")]
    TrainingAborted {
        iteration: u64,
        stage: &'static str,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that signal a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::TrainingAborted { .. })
    }
}
