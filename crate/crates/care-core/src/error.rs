//! Error type shared across the crate.
//!
//! Every fallible operation returns [`CareError`]. The variants are grouped by
//! who is at fault: `Config` for bad settings or arguments, `Io`/`Format` for
//! problems with input files, and `Shape`/`Contract`/`Numeric` for violations
//! detected inside the math pipeline.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CareError>;

#[derive(Debug, Error)]
pub enum CareError {
    /// Two operands had incompatible dimensions. Both shapes are named so the
    /// message is actionable without a debugger.
    #[error("shape mismatch in {op}: left operand is {lhs_rows}x{lhs_cols}, right operand is {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// An API precondition was violated (e.g. backward on a non-scalar).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A text input file was malformed. `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    /// An OS-level I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration: unknown enum value, out-of-range hyperparameter,
    /// missing required input, inconsistent field combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical failure at runtime (non-finite loss, degenerate input to a
    /// metric, ...).
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CareError {
    /// Convenience constructor for contract violations.
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        CareError::Contract {
            op,
            msg: msg.into(),
        }
    }

    /// Convenience constructor for configuration errors.
    pub fn config(msg: impl Into<String>) -> Self {
        CareError::Config(msg.into())
    }

    /// Convenience constructor for numerical failures.
    pub fn numeric(msg: impl Into<String>) -> Self {
        CareError::Numeric(msg.into())
    }

    /// Process exit code used by the command-line interface: 1 for usage or
    /// configuration problems, 2 for unreadable or malformed data, 3 for
    /// numerical failures (internal invariant violations fall in this bucket
    /// too, since they surface as broken math).
    pub fn exit_code(&self) -> i32 {
        match self {
            CareError::Config(_) => 1,
            CareError::Io { .. } | CareError::Format { .. } => 2,
            CareError::Shape { .. } | CareError::Contract { .. } | CareError::Numeric(_) => 3,
        }
    }
}

/// Attach a path to a raw I/O error.
pub fn io_err(path: &std::path::Path, source: std::io::Error) -> CareError {
    CareError::Io {
        path: path.display().to_string(),
        source,
    }
}
