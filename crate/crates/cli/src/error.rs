use std::path::Path;

use mixmed::ErrorClass;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] mixmed::Error),

    #[error("cannot access '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Config(_) => ErrorClass::Config,
            CliError::Core(e) => e.class(),
            CliError::Io { .. } => ErrorClass::Data,
        }
    }

    /// 2 for configuration, 3 for data, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            class: match self.class() {
                ErrorClass::Config => "config",
                ErrorClass::Data => "data",
                ErrorClass::Numerical => "numerical",
            },
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub class: &'static str,
    pub exit_code: i32,
    pub message: String,
}
