use std::path::PathBuf;

use thiserror::Error;
use tod_core::corpus::CorpusError;
use tod_core::params::CheckpointError;
use tod_core::system::SystemError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    System(SystemError),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Tag an error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> CliError {
        CliError::Stage { stage, source: Box::new(self) }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Missing(_) => 4,
            CliError::System(SystemError::Alignment(_)) => 2,
            CliError::System(_) => 1,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { path, source } => CliError::Io { path: path.into(), source },
            CorpusError::Spec(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => CliError::Io { path: path.into(), source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        CliError::System(e)
    }
}
