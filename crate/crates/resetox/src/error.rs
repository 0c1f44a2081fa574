use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("scorer failure: {0}")]
    Scorer(String),

    #[error("training diverged at epoch {epoch}{}", checkpoint.as_ref().map(|c| format!("; last good checkpoint: {c}")).unwrap_or_default())]
    Diverged {
        epoch: usize,
        checkpoint: Option<String>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 = contract error, 2 = I/O or format
    /// error, 3 is reserved for the gradcheck gate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) | Error::Parse { .. } => 2,
            _ => 1,
        }
    }
}
