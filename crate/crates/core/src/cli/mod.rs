//! Run configuration, manifests, and the command entry points behind the
//! `opendet` binary: dataset generation, training, evaluation, position
//! embedding comparisons, attention dumps, and chart emission.

mod config;
mod run;

pub use config::{manifest_to_config, ConfigError, RunConfig, RunManifest};
pub use run::{
    cmd_compare_pe, cmd_dump_attention, cmd_eval, cmd_gen, cmd_plot, cmd_train, evaluate_model,
    train_model, CompareOutcome, TrainOutcome,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(#[from] crate::synthscene::SceneError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::autodiff::CheckpointError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("autodiff: {0}")]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("{0}")]
    Invalid(String),
}
