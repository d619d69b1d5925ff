use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Input was structurally valid but degenerate (e.g. an empty mask).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file decoded but its contents do not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint payload is damaged or truncated.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Training produced a non-finite loss.
    #[error("numerical divergence at epoch {epoch} step {step}: {what}")]
    Divergence {
        epoch: usize,
        step: usize,
        what: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
