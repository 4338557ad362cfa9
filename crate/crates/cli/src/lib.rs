//! Command-line driver for federation selection.
//!
//! Every subcommand reads one [`config::RunConfig`], writes its outputs and
//! a `manifest.json` into a run directory, and reports failures with the
//! phase that produced them.

// `!(x > 0.0)` deliberately rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod rundir;

pub use config::RunConfig;
pub use error::CliError;
pub use rundir::RunDir;
