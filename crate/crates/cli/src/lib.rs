//! Configuration and command pipelines behind the `hdno` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
