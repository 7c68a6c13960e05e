//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

/// Failure classes used across the engine.
///
/// `Dim` names the offending axis so shape bugs are diagnosable from the
/// message alone; the remaining variants mirror the contract language of the
/// operations that raise them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoreError {
    /// Shape mismatch on a named axis.
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Non-finite values or numerically invalid input.
    Numeric { op: &'static str, detail: String },
    /// An index (e.g. a class label) outside its valid range.
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// API contract violation (e.g. backward on a non-scalar).
    Contract(String),
    /// Invalid object state (e.g. backward called twice on one graph).
    State(String),
    /// Invalid configuration or dataset spec.
    Config(String),
    /// Invalid argument value.
    Argument(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dim {
                op,
                axis,
                expected,
                got,
            } => write!(
                f,
                "{op}: dimension mismatch on axis `{axis}` (expected {expected}, got {got})"
            ),
            CoreError::Numeric { op, detail } => write!(f, "{op}: numeric error: {detail}"),
            CoreError::Index { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::State(msg) => write!(f, "invalid state: {msg}"),
            CoreError::Config(msg) => write!(f, "config error: {msg}"),
            CoreError::Argument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_error_names_axis() {
        let e = CoreError::Dim {
            op: "conv2d",
            axis: "channels",
            expected: 4,
            got: 3,
        };
        let msg = alloc::format!("{e}");
        assert!(msg.contains("channels"));
        assert!(msg.contains("expected 4"));
    }
}
