//! Experiment orchestration for latent degradation/restoration training:
//! config files, seeded runs, ablation grids, batch-size sweeps and report
//! export.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Task};
pub use error::{HarnessError, Result};
pub use grid::{batch_size_sweep, run_ablation_grid, GridResult, GridSummary, SweepResult};
pub use report::RunReport;
pub use runner::{run_experiment, run_with_model, RunOutcome};
