//! Configuration, commands and output writers behind the `kdl` binary.

pub mod commands;
pub mod config;
pub mod standin;
