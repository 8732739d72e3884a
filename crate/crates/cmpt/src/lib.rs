//! Files, configuration and the command pipeline around `cmpt-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod pipeline;
pub mod report;
