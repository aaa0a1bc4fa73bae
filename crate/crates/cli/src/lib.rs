//! Command-line workflows and the HTTP session service around `sketchloop-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod models;
pub mod server;

pub use checkpoint::Checkpoint;
pub use error::CliError;
