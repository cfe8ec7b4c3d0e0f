//! Command-line front end for training, evaluating and ablating
//! bootstrapped graph encoders.

pub mod ablate;
pub mod app;
pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
