//! Command-line front end for `bbalpha`: run configuration, repeated
//! train/test splits, Monte-Carlo predictions and report emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod posterior;
pub mod predict;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
