//! File formats, checkpoints, run manifests, and the `utp` command line on
//! top of `utp-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod logs;
pub mod manifest;

pub use error::{Error, Result};
