//! Files, configuration and the batch pipeline around [`stopbound_core`].
//!
//! [`pipeline::run`] executes a [`config::RunConfig`] and writes its artifacts
//! (value surface, boundary family, slopes, conditions, Monte Carlo probes and a
//! summary) next to a content-hashed manifest.

pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::RunError;
pub use pipeline::{run, Outcome, Problem, Registry};
