//! Command-line front end of the `caduf` super-resolution library: dataset
//! synthesis, training, inference and evaluation, plus the file formats they use.

pub mod commands;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
