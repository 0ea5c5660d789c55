use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hsi_ldm_core::error::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed file: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// 2 for argument and validation problems, 3 for file problems, 4 when
    /// training diverged.
    pub fn exit_code(&self) -> i32 {
        use hsi_ldm_core::error::Error;
        match self {
            CliError::Core(Error::Training(_)) => 4,
            CliError::Core(_) | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
        }
    }
}
