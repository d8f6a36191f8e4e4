//! Experiment orchestration: configuration files, run directories and the
//! regime × protocol grid.
//!
//! A run directory holds `config.txt`, `manifest.json`, `metrics.jsonl`, the
//! generated datasets under `data/` and every saved model under `checkpoints/`.

mod config;
mod grid;
mod manifest;
mod run;

#[cfg(test)]
mod tests;

pub use config::{DataSection, ExperimentConfig, ModelSection, Profile, Protocol};
pub use grid::{grid_summary, run_dir_name, run_grid, GridRow, GridRun, GridTable};
pub use manifest::{code_version, platform, CheckpointKind, PhaseSummary, ReportEntry, RunLock, RunManifest, RunStatus, CONFIG_FILE, MANIFEST_FILE};
pub use run::{evaluate, generate_data, load_teachers, run, run_adapt, run_stage, write_data, Stage, METRICS_FILE};
