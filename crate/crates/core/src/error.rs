use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Config/usage problems are separated from runtime
/// failures so the CLI can map them to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape { context: String, expected: String, got: String },

    #[error("index out of bounds: {what} {index} not below {bound} in {table}")]
    Bounds { table: String, what: String, index: usize, bound: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that stem from user input — bad config, bad files,
    /// bad data (CLI exit code 1). What remains (shape, bounds, numeric)
    /// indicates an internal invariant failure (exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema(_)
                | Error::Config(_)
                | Error::Checkpoint(_)
                | Error::Incompatible(_)
                | Error::Invalid(_)
                | Error::Io { .. }
        )
    }
}
