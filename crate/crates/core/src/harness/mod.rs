//! Experiment orchestration: run configuration, the synthetic data pipeline,
//! training runs with checkpoints, p-sweeps, gradient checks, and CSV output.

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod results;
pub mod sweep;
pub mod train;

pub use config::{DataConfig, RunConfig, WeightKind};
pub use gradcheck::{gradcheck, gradcheck_model, GradcheckReport};
pub use results::{parse_results_csv, results_csv, table_csv, PLabel, ResultRow, SweepCell, RESULTS_HEADER};
pub use sweep::{cell_config, run_cell, run_sweep, DEFAULT_P_VALUES};
pub use train::{run_training, Checkpoint, RunOutput, StepReport, Trainer};
