use std::path::PathBuf;

/// Failures of a command, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("missing files:\n{}", .0.iter().map(|p| format!("  {}", p.display())).collect::<Vec<_>>().join("\n"))]
    MissingFiles(Vec<PathBuf>),

    #[error(transparent)]
    Core(#[from] caduf::error::Error),
}

pub type CliResult<T> = Result<T, CliError>;

/// Exit status for numeric failures such as a diverging loss.
pub const EXIT_NUMERIC: i32 = 3;
/// Exit status for bad arguments, files or formats.
pub const EXIT_INPUT: i32 = 2;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use caduf::error::Error;
        match self {
            CliError::Core(Error::NonFinite(_) | Error::NotConverged { .. }) => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        }
    }
}
