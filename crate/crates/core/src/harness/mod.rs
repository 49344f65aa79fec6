//! Experiment harness: misspecification sweeps over seeds and ablations,
//! scored exactly against the tabular oracle.

pub mod cell;
pub mod config;
pub mod records;
pub mod sweep;

pub use cell::{run_cell, run_cell_observed, CellKey, CellResult, CellRows, EpisodeView};
pub use config::{default_zeta_grid, Ablation, ExperimentConfig, CALIBRATION_TARGET, WORKERS_ENV_VAR};
pub use records::{
    episode_header, mean_std, read_episode_csv, summarize, summarize_rows, write_episode_csv, EpisodeRow, RunSummary,
    SummaryRow,
};
pub use sweep::{
    calibrate_gamma_scale, execute_sweep, run_sweep, write_outputs, Calibration, OutputPaths, SweepMetadata,
    SweepOutcome,
};
