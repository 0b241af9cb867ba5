use thiserror::Error;

/// Error type shared by every module.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or axes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration field failed validation.
    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },

    /// A file did not match its declared binary/text layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Train(String),

    /// The attacker hit non-finite gradients.
    #[error("attack error: {0}")]
    Attack(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    /// Exit code for the CLI: 2 for config/format problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
