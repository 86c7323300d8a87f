//! Error type shared across the crate.
//!
//! Errors are grouped by how a caller should react: configuration and
//! vocabulary problems are usage errors, shape/domain/degeneracy problems
//! are numerical failures, and I/O problems are environmental. The CLI maps
//! these groups onto process exit codes.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Fl2tError {
    /// Two operands had incompatible dimensions.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// An input violated a mathematical precondition (zero-norm vector,
    /// weight outside its admissible interval, empty operand list).
    #[error("domain error: {0}")]
    Domain(String),

    /// A quantity that must be nonzero for the operation to mean anything
    /// vanished (all-zero match scores, zero aggregate gradient).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A computation produced NaN or infinity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration field failed validation or an unknown key appeared.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A prompt referenced a token id outside the model vocabulary.
    #[error("unknown token id {token} (vocabulary size {vocab})")]
    UnknownToken { token: usize, vocab: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Fl2tError {
    /// Process exit code the CLI should use for this error.
    ///
    /// 2 = usage/config, 3 = numerical, 4 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Fl2tError::Config { .. } | Fl2tError::UnknownToken { .. } => 2,
            Fl2tError::Shape { .. }
            | Fl2tError::Domain(_)
            | Fl2tError::Degenerate(_)
            | Fl2tError::Numerical(_) => 3,
            Fl2tError::Io(_) | Fl2tError::Json(_) => 4,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Fl2tError>;
