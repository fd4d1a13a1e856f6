//! Run orchestration for the `dyadhops` binary: configuration, output
//! formats and the subcommands.

pub mod commands;
pub mod config;
pub mod format;

pub use config::RunConfig;
