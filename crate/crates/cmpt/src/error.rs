//! Command-level errors and their process exit codes.

use std::path::{Path, PathBuf};

use cmpt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Diverged(String),

    #[error("gradient check failed: max relative error {0:e} exceeds 1e-4")]
    GradCheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Diverged(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn is_divergence(e: &CoreError) -> bool {
    match e {
        CoreError::Diverged { .. } | CoreError::NonFinite { .. } => true,
        CoreError::Cell { source, .. } => is_divergence(source),
        _ => false,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        if is_divergence(&e) {
            return CliError::Diverged(msg);
        }
        match e {
            CoreError::Config(_) | CoreError::InfeasibleProtocol(_) => CliError::Config(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
