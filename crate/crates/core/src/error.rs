use thiserror::Error;

/// Errors raised by the library's public surface.
///
/// Non-finite values are treated as hard errors everywhere: a NaN that
/// escapes into the mutual-learning loop silently poisons every later
/// phase, so every op checks its output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("diffusion step index {k} out of range [1, {max}]")]
    StepOutOfRange { k: usize, max: usize },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
        Error::InvalidArg {
            op,
            msg: msg.into(),
        }
    }
}
