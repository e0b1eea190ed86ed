//! Experiment plumbing: configuration files, the four commands, and report files.

mod commands;
mod config;
mod report;

pub use commands::{
    cmd_adapt, cmd_compare, cmd_eval, cmd_train_source, models_from_checkpoint, Split, DISCRIMINATOR_CHECKPOINT,
    SOURCE_CHECKPOINT, TARGET_CHECKPOINT,
};
pub use config::{parse_config, parse_config_str, ExperimentConfig, DATA_ROOT_ENV};
pub use report::{confusion_csv, emit_report, losses_csv, per_class_csv, summary_csv, RunReport};
