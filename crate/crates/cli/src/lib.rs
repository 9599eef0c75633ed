//! Command-line front end for the guided-sampling experiments.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use cli::run;
pub use config::{ExperimentConfig, Profile};
pub use error::CliError;
