use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("unknown token id {0}")]
    UnknownToken(u16),

    #[error("non-finite loss in group {group} (task {task_id})")]
    NonFiniteLoss { group: usize, task_id: u64 },

    #[error("empty selection: in-context distillation needs at least one response")]
    EmptySelection,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run directory {0} already holds artifacts (use force or resume)")]
    RunDirExists(PathBuf),

    #[error("phase {phase} failed")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed record in {path} line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    /// Wraps an error with the pipeline phase it came from.
    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase: phase.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the configuration rather than by a phase.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::RunDirExists(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
