//! Command implementations behind the `atamlab` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use error::{CliError, ExitKind};
