//! Contrastive finetuning: similarity, symmetric loss with its analytic
//! gradient, mixed real/generated batch sampling, and an AdamW loop.

pub mod finetune;
pub mod loss;
pub mod sampler;

use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

pub use finetune::{finetune, Checkpoint, FinetuneOptions, LinearDualEncoder, LossRecord, TrainOutcome, TrainableDualEncoder};
pub use loss::{contrastive_loss, embedding_loss, loss_gradient, similarity, LossGradient, SimilarityMatrix};
pub use sampler::{generated_share, Batch, MixedBatchSampler, Provenance};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("temperature must be > 0, got {0}")]
    Temperature(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("similarity entries must be > 0, got {0}")]
    NonPositive(f64),
    #[error("mix ratio {0} outside [0, 1]")]
    MixRatio(f64),
    #[error("{0} pool is empty but its batch share is > 0")]
    EmptyPool(&'static str),
    #[error("loss diverged at step {step}; restored checkpoint from epoch {}", .last_good.epoch)]
    Diverged { step: usize, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Serialize(String),
}
