//! File formats, checkpoints and experiment runners for `amfnet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod png;
pub mod report;
pub mod run;

pub use error::{Error, Result};
