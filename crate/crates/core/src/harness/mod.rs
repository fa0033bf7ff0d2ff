//! Toy-scale CTC training on a synthetic task, learning-rate sweeps and the
//! self-verification suite.

pub mod config;
pub mod optim;
pub mod stability;
pub mod synth;
pub mod train;
pub mod verify;

pub use config::{ModelSection, RunConfig, TrainSection};
pub use stability::{stability_experiment, stability_toy_config, worker_threads, CellSummary, StabilityReport, SweepRun};
pub use optim::{clip_global_norm, Adam, WarmupSchedule};
pub use synth::{bucket, gen_split, gen_synthetic_batch, Batch, Split, TaskSpec, Utterance};
pub use train::{decode, evaluate, load_run, train, EpochRecord, Evaluation, RunRecord, StepRecord, TrainOutcome};

use crate::nn::ParamError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
