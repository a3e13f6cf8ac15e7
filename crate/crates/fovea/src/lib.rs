//! Std companion to `fovea-core`: config files, on-disk artifacts, the TCP
//! transport and the workflows the `fovea` binary runs.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod net;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{Error, Result};
