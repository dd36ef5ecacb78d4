//! Command implementations behind the `diffinspect` binary.

pub mod commands;
pub mod config;
pub mod plot;
