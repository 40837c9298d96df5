//! Synthetic-task generation and experiment presets.

pub mod grid;
pub mod task;

pub use grid::{
    pretrain_reference, run_experiment_grid, run_preset, subsample, write_grid_csv, ExperimentConfig,
    ExperimentPreset, GridRow, PresetResult, GRID_CSV_HEADER,
};
pub use task::{
    generate_synthetic_task, NoiseChannel, SyntheticTask, SyntheticTaskConfig, TaskCorpora, TaskStats,
};
