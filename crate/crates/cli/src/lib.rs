//! Configuration, manifests and subcommand execution for the `coda` binary.

pub mod manifest;
pub mod run;

pub use manifest::{parse_config, Command, Overrides, RunManifest, UsageError};
pub use run::run;
