//! Configuration, synthetic data, the training loop, the ablation,
//! robustness and sweep runners, and the command-line front end.

pub mod cli;
mod config;
mod dataset;
mod experiments;
mod report;
mod synth;
mod train;

#[cfg(test)]
mod tests;

pub use config::{parse_key_values, ExperimentConfig};
pub use dataset::{build_dataset, inject_noise, Dataset, DatasetStats};
pub use experiments::{
    run_ablation, run_robustness, run_sweep, train_and_test, with_noise, RobustnessRow, RunResult, SweepParam,
    SweepRow,
};
pub use report::{to_csv, to_jsonl, write_csv, write_jsonl};
pub use synth::{generate_synthetic, synthetic_category, synthetic_log, SyntheticSpec};
pub use train::{
    build_model, config_from_checkpoint, evaluate_split, restore_model, stream, train, EpochLog, Stream, TrainOutcome,
};
