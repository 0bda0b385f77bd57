use std::path::PathBuf;

use rawtask_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gradient check failed for {0}")]
    Gradcheck(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

impl RunError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunError {
        let path = path.into();
        move |source| RunError::Io { path, source }
    }

    /// Process exit code: 2 config, 3 numeric abort, 4 gradient check, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(CoreError::NonFinite(_)) => 3,
            RunError::Gradcheck(_) => 4,
            _ => 1,
        }
    }
}
