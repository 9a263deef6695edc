//! Crate-wide error type.
//!
//! Variants map onto the failure classes surfaced by the CLI: configuration
//! problems exit with code 2, numeric failures with code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes. Names both shapes involved.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration value or unparsable config.
    #[error("configuration error: {0}")]
    Config(String),

    /// API contract violation (non-scalar loss, repeated backward, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// VALID convolution would produce an empty output.
    #[error("empty output: input length {len} <= (k-1)*rate = {span} under VALID padding")]
    EmptyOutput { len: usize, span: usize },

    /// Semi-orthogonal constraint cannot be satisfied (more rows than columns).
    #[error("infeasible semi-orthogonal constraint: {rows}x{cols} has rows > cols")]
    Infeasible { rows: usize, cols: usize },

    /// Batch norm asked for stored statistics before any train-mode update.
    #[error("uninitialized statistics: batch norm used in infer mode before any train-mode update")]
    UninitializedStats,

    /// File does not follow the documented container/checkpoint format.
    #[error("format error: {0}")]
    Format(String),

    /// File is structurally valid up to `offset` bytes, then truncated/garbled.
    #[error("corrupt file at byte offset {offset}: {msg}")]
    Corruption { offset: u64, msg: String },

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
