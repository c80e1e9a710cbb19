use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] timesteer::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn usage(msg: impl Into<String>) -> Self {
        HarnessError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HarnessError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use timesteer::Error as E;
        match self {
            HarnessError::Usage(_) => exit::USAGE,
            HarnessError::Data(_) | HarnessError::Io { .. } => exit::DATA,
            HarnessError::Core(e) => match e {
                E::Argument(_) => exit::USAGE,
                E::Numerical(_) => exit::NUMERICAL,
                E::Data { .. } | E::Format { .. } | E::Mismatch(_) | E::Io { .. } => exit::DATA,
            },
        }
    }
}
