//! Command-line harness: configuration, commands and run artifacts.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod plot;
pub mod record;

pub use cli::Cli;
pub use commands::run;
pub use config::{Pipeline, RunConfig};
pub use error::{CliError, ErrorKind};
