//! File formats, subcommands and the HTTP service of the `mvemu` tool.

pub mod commands;
pub mod error;
pub mod fitfile;
pub mod io;
pub mod manifest;
pub mod server;

pub use error::{CliError, CliResult};
