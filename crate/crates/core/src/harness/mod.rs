//! Experiment orchestration: configuration, the per-task run loop with
//! checkpoints and resume, λ sweeps and plot data.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml                      resolved configuration
//! manifest.json                    status, config hash, progress, timings
//! metrics.csv                      method,seed,tasks_seen,eval_task,metric_name,value
//! traces/seed{S}_task{T}.csv       per-epoch objective terms
//! checkpoints/seed{S}/task{T}.state
//! ```

pub mod config;
pub mod plot;
pub mod run;
pub mod state;
pub mod sweep;

pub use config::{Experiment, ExperimentConfig, Method, Overrides, DATA_DIR_ENV};
pub use plot::{emit_plot_data, mean_stderr, FigureId};
pub use run::{load_run_config, read_metrics, run, Manifest, RunOptions, RunResult, RunStatus};
pub use sweep::{select_best, sweep, SweepReport};
