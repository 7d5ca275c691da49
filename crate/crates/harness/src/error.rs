//! Harness errors and their process exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run diverged at step {step}: {detail} (partial logs in {dir})")]
    Diverged { step: usize, detail: String, dir: PathBuf },
    #[error(transparent)]
    Core(#[from] lisa_core::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numeric divergence, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use lisa_core::Error as E;
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Io { .. } => EXIT_IO,
            HarnessError::Diverged { .. } => EXIT_DIVERGED,
            HarnessError::Core(e) => match e {
                E::Io { .. } | E::Format(_) => EXIT_IO,
                E::NonFinite(_) => EXIT_DIVERGED,
                _ => EXIT_CONFIG,
            },
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
