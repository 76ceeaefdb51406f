//! Command-line front end and HTTP inference service for multi-sensor
//! learning.

pub mod cli;
pub mod server;
pub mod workflow;

pub use cli::{run, Cli, Command};
pub use server::{router, AppState, ServerConfig};
