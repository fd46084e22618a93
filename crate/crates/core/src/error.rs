use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, size, range).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is invalid; `key` names the offending setting.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },
    /// A non-finite value appeared while evaluating a graph node.
    #[error("numeric failure at node {node}")]
    Numeric { node: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}
