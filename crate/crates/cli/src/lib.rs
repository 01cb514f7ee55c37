//! Command line front end: artifact generation, training, morphing,
//! evaluation and the canned trend experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod world;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, EXIT_DIVERGED, EXIT_INPUT, EXIT_USAGE};
