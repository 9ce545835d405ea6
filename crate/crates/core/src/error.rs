use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// The operation is not valid in the object's current state.
    #[error("state error: {0}")]
    State(String),

    /// Bad input values (out-of-range ids, NaN, negative rates, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Bad configuration document.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint does not fit the model or data it is used with.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training loss exceeded the divergence guard.
    #[error("diverged: {0}")]
    Divergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
