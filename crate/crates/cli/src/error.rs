use std::path::PathBuf;

use splitcomp_core::Error;

/// Everything a subcommand can fail with, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no run directories given")]
    NoRuns,
    #[error("missing artifacts:\n{}", list(.0))]
    Missing(Vec<PathBuf>),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("  {}", p.display())).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NoRuns | CliError::Missing(_) => 3,
            CliError::Core(e) => match e {
                Error::MissingConfig(_)
                | Error::UnknownRecipe(_)
                | Error::UnknownArchitecture(_)
                | Error::InvalidSplitConfig(_)
                | Error::InvalidTemperature(_)
                | Error::InvalidStage(_)
                | Error::InvalidChannel(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            },
            CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
