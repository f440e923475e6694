//! Command line and HTTP front ends for the forumint pipeline.

pub mod commands;
pub mod config;
pub mod server;

pub use commands::{execute, exit_code, Cli};
