//! Crate-wide error type.

use crate::attack::AttackTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    /// A caller broke an operation precondition (shape mismatch, bad label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Sequence too short for an operation that needs consecutive frames.
    #[error("degenerate sequence: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A document failed schema validation; `field` names the offending field.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("training error: {0}")]
    Training(String),

    /// The attack optimizer produced a non-finite iterate. The trace up to the
    /// failure is preserved for diagnosis.
    #[error("optimization diverged after {iterations} internal iterations")]
    Diverged {
        iterations: usize,
        trace: Box<AttackTrace>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
