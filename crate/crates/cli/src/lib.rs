//! Command line and HTTP front end for `scenegen` checkpoints.

pub mod commands;
pub mod server;
pub mod service;

pub use commands::{run, Cli, Command, TrainSettings};
pub use service::{Service, ServiceError};
