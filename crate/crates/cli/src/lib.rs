//! Command-line workflow: train models, explain at local, group or global
//! granularity, verify report bundles and sweep the diversity weight.

pub mod ablate;
pub mod bundle;
pub mod config;
pub mod error;
pub mod eval_table;
pub mod output;
pub mod pipeline;

pub use config::{RunConfig, Settings};
pub use error::CliError;
