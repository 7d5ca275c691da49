//! Experiment runner for full-parameter, LoRA and LISA fine-tuning at desk
//! scale: config-driven runs, ablation sweeps, the convex-quadratic
//! convergence check, memory estimates and plot-ready data.
//!
//! The `lisa` binary exposes these as the verbs `run`, `sweep`,
//! `quad-check`, `plot-data` and `estimate-memory`.

pub mod config;
pub mod error;
pub mod estimate;
pub mod plot;
pub mod quad;
pub mod runner;
pub mod sweep;

pub use config::{output_root, Method, RunConfig, OUTPUT_ROOT_ENV, SCHEMA_VERSION};
pub use error::{HarnessError, Result, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK};
