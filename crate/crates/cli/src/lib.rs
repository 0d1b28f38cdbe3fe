//! Command-line front end: argument types, checkpoint files and the
//! subcommand implementations, exposed as a library for tests.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod error;

pub use error::{CliError, Result};
