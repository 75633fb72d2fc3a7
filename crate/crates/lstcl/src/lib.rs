//! Files, commands and parallel execution around `lstcl-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod pipeline;
pub mod report;

mod fsutil;

pub use error::{CliError, Result};
