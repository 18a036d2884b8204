//! Configuration, checkpoints and the commands behind the `tinr` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use config::{Config, Task};
pub use error::{CliError, Result};
