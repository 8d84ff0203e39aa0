use std::path::PathBuf;

use gaitadapt_core::GaitError;
use thiserror::Error;

/// Failures raised by the command layer itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{} is not empty; pass --force to overwrite", .0.display())]
    NotEmpty(PathBuf),

    #[error("{} is locked by another process (remove the lock file if it is stale)", .0.display())]
    Locked(PathBuf),
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Process exit status for an error chain: 2 for configuration problems,
/// 3 for data and file problems, 4 for numerical failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) | CliError::NotEmpty(_) => EXIT_CONFIG,
                CliError::Data(_) => EXIT_DATA,
                CliError::Locked(_) => EXIT_OTHER,
            };
        }
        if let Some(e) = cause.downcast_ref::<GaitError>() {
            return match e {
                GaitError::Config { .. } => EXIT_CONFIG,
                GaitError::Numerical { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<toml::de::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}
