//! Experiment runner for the ddsense pipeline: configuration, artifact
//! bookkeeping, subcommands and the measurement-replica scenario.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod replica;

pub use commands::{cmd_detect, cmd_eval, cmd_generate, cmd_replica, cmd_report, cmd_train, Backend, Run};
pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, CliResult};
