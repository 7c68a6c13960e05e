//! Harness around `loupe-core`: run configuration, dataset/checkpoint/metrics
//! file formats, the training loop, and the CLI subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod metrics;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
