use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A layout, scenario or run configuration violates an invariant.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// An operation was called outside of its contract (wrong dimensions,
    /// empty inputs, stepping a finished episode, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A component is not in a state where the operation makes sense.
    #[error("state error: {0}")]
    State(String),

    #[error("no path between {from} and {to}")]
    Unreachable {
        from: crate::grid::GridPos,
        to: crate::grid::GridPos,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
