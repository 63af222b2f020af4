use thiserror::Error;

use crate::hollow::PlanViolation;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at node `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("non-finite value produced at node `{node}`")]
    NonFinite { node: String },

    #[error("missing {what} `{name}`")]
    Missing { what: &'static str, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid hollow plan: {0}")]
    Plan(#[from] PlanViolation),

    #[error("adapter error: {0}")]
    Adapter(String),

    /// An input artifact does not belong to the active configuration
    /// (stale cache, wrong preset, missing file contents).
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("malformed {format} data: {msg}")]
    Format { format: &'static str, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            format,
            msg: msg.into(),
        }
    }
}
