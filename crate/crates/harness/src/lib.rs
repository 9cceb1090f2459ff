//! Synthetic sequences, the end-to-end pipeline, metrics and file formats.

pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod scenario;
pub mod scene;
pub mod sequence;

pub use config::HarnessConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{run_pipeline, run_sequence, write_artifacts, RunOutput, RunReport};
pub use scenario::Scenario;
