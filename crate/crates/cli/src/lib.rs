//! Command-line orchestration of continual gait experiments: synthetic data
//! generation, training with per-step checkpoints, backtesting, comparison
//! and reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::{exit_code, CliError};
