//! File formats, run configuration and the pipeline commands behind the
//! `hsi-ldm` binary.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
