//! File formats, experiment pipelines and the `mlim` command line on top of
//! [`mlim_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod ppm;
pub mod report;
pub mod settings;
pub mod trainlog;

pub use error::{AppError, AppResult};
