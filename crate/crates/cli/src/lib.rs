//! Experiment runner for the adaptive MCMC diagnostics engine.
//!
//! Each subcommand reads a [`config::RunConfig`], runs one experiment,
//! writes its artifacts and a [`record::RunRecord`] into the output
//! directory, and maps the outcome to an exit code: 0 when every check
//! passes, 2 when a predicted failure was reproduced, 1 otherwise.

pub mod config;
pub mod experiments;
pub mod record;
