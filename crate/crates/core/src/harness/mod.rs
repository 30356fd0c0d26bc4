//! Configuration, checkpoints, logs, sweeps and plots.

pub mod checkpoint;
pub mod config;
pub mod csvlog;
pub mod plot;
pub mod runner;
pub mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ExperimentConfig, Preset};
pub use plot::emit_plot;
pub use runner::{run_experiment, run_sweep};
pub use sweep::{Axis, SweepConfig, SweepTable};
