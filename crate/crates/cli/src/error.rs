use rangeloc::io::IoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient geometry: {0}")]
    Geometry(String),
    #[error("restart required: {restarts} restarts exceed the limit of {limit}")]
    RestartRequired { restarts: usize, limit: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Geometry(_) => 3,
            CliError::RestartRequired { .. } => 4,
            CliError::Parse(_) => 5,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Parse { .. } => CliError::Parse(e.to_string()),
            IoError::Io { .. } => CliError::Config(e.to_string()),
            IoError::Anchors { .. } => CliError::Config(e.to_string()),
        }
    }
}
