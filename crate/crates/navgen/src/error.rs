//! Crate-wide error type and result alias.
//!
//! One enum covers all subsystems so that `?` composes across module
//! boundaries. Variants are grouped by how callers are expected to react:
//! `Config` means the caller asked for something contradictory and should fix
//! its inputs, `Data` means an artifact on disk is unusable, and the rest are
//! runtime contract violations surfaced with enough context to debug.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, NavError>;

#[derive(Debug, Error)]
pub enum NavError {
    /// Invalid configuration: bad sizes, out-of-range hyperparameters,
    /// contradictory flags.
    #[error("config error: {0}")]
    Config(String),

    /// Unusable data artifact: schema mismatch, corrupt record, missing file
    /// content. Carries file/line context where available.
    #[error("data error: {0}")]
    Data(String),

    /// A graph lookup failed (unknown node or environment id).
    #[error("unknown id: {0}")]
    UnknownId(String),

    /// An action was applied in a state where it is not legal.
    #[error("illegal action: {0}")]
    IllegalAction(String),

    /// Tensor shape mismatch, naming the offending operation and both shapes.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Numerical contract violation (non-finite value, repeated backward,
    /// non-scalar loss, index out of bounds inside an op).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NavError {
    /// Process exit code for the CLI: config errors exit 2, data errors
    /// (including I/O and parse failures) exit 3, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            NavError::Config(_) => 2,
            NavError::Data(_) | NavError::Io(_) | NavError::Json(_) => 3,
            _ => 1,
        }
    }
}

/// Shorthand constructors; keeps call sites compact without a macro.
pub fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NavError::Config(msg.into()))
}

pub fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NavError::Data(msg.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(NavError::Config("x".into()).exit_code(), 2);
        assert_eq!(NavError::Data("x".into()).exit_code(), 3);
        assert_eq!(
            NavError::Io(std::io::Error::new(std::io::ErrorKind::Other, "x")).exit_code(),
            3
        );
        assert_eq!(NavError::IllegalAction("x".into()).exit_code(), 1);
    }
}
