//! Experiment driver behind the `jacguard` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod output;
pub mod reproduce;
pub mod zoo;

pub use cli::{run, Cli};
pub use config::ExperimentConfig;
