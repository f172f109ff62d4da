//! Analysis toolkit around the quantization simulator: binary tensor
//! ingestion, outlier and per-token range diagnostics, grouped-scheme
//! planning, range estimation, and simulation/ablation drivers.

pub mod commands;
pub mod error;
pub mod formats;
pub mod reports;
pub mod tensor_file;

pub use error::{CliError, Result};
