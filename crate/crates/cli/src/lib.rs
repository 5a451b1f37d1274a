//! Library surface of the experiment runner: configuration schema and the
//! subcommand implementations, kept callable for tests.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
