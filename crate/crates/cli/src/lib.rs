//! Library half of the `qkdkeyrate` command: configuration handling and
//! subcommand implementations.

pub mod commands;
pub mod config;
