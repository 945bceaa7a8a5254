use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] latentdr::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("worker thread panicked")]
    Worker,
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// blow-ups, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use latentdr::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(E::Config(_) | E::Range { .. } | E::BatchSize { .. }) => 2,
            HarnessError::Core(E::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}
