//! Library side of the `trun` binary: run configuration and the
//! subcommand implementations, exposed so integration tests can drive them
//! directly.

pub mod commands;
pub mod runconfig;
