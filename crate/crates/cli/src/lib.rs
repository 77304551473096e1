//! Command-line front end: configuration, experiment commands, self-checks
//! and artifact export.

pub mod commands;
pub mod config;
