//! Experiment runner: presets, configuration, and the model → sense →
//! measure → reconstruct → analyze pipeline with reproducible seeds.

pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod presets;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
pub use pipeline::{run_flux_sweep, run_pipeline, run_steering, RunManifest};
