//! Datasets, file formats, configuration, experiments and the CLI.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod experiments;
pub mod io;

pub use cli::run_cli;
pub use config::Config;
