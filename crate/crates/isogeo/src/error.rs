use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// A check failed or an experiment could not complete.
pub const EXIT_FAILURE: i32 = 1;
/// The configuration or the command line was rejected.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] isogeo_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        HarnessError::Format { what, msg: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}
