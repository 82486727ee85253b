use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data file not found: {}", .0.display())]
    MissingData(PathBuf),

    #[error("malformed data in {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ctep::Error,
    },

    #[error("benchmark failed: {failed} of {total} replicates errored at variance {variance}")]
    TooManyFailures { variance: f64, failed: usize, total: usize },

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn core(context: impl Into<String>, source: ctep::Error) -> Self {
        CliError::Core {
            context: context.into(),
            source,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input, 3 for numerical breakdown,
    /// 4 for non-convergence under `--require-convergence`, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingData(_) | CliError::Data { .. } => EXIT_CONFIG,
            CliError::Core { source, .. } if source.is_numerical() => EXIT_NUMERICAL,
            CliError::Core { .. } => EXIT_CONFIG,
            CliError::TooManyFailures { .. } => EXIT_NUMERICAL,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Io { .. } => 1,
        }
    }
}
