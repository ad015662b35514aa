//! Experiment plumbing: configuration, the training loop, grids and the
//! verification suites.

pub mod config;
pub mod grid;
pub mod train;
pub mod verify;

pub use config::{DatasetSpec, Model, RunConfig};
pub use grid::{run_grid, GridReport, GridSpec};
pub use train::{run_training, run_training_on, write_metrics, MetricsRecord, Summary};
pub use verify::{verify_gradcheck, verify_moments, verify_zeta, Check};
