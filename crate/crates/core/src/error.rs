use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ply parse error at line {line}: {msg}")]
    Ply { line: usize, msg: String },

    #[error("coordinate {coord:?} outside the {precision}-bit range")]
    OutOfRange { coord: [i64; 3], precision: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("bitstream version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
