//! File formats and subcommands behind the `cggm` binary.

pub mod commands;
pub mod error;
pub mod formats;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::{exit, CliError, CliResult};
