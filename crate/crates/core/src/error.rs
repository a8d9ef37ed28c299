use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: expected {expected}, got {found}")]
    Layout { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { expected: u8, found: u8 },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("learner {learner} diverged: {source}")]
    Diverged {
        learner: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code used by the CLI: 1 for configuration problems, 2 for anything at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
