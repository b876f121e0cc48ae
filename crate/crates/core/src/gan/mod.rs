//! Fixed-point translation GAN: loss terms, networks, and the training loop.

pub mod graph_losses;
pub mod losses;
pub mod nets;
pub mod train;

use thiserror::Error;

pub use losses::{
    adversarial_loss, adversarial_loss_batch, conditional_identity_loss, cycle_consistency_loss,
    discriminator_objective, domain_cls_loss_fake, domain_cls_loss_real, generator_objective,
    LossError, LossWeights, LOG_EPS,
};
pub use nets::{DiscOut, Discriminator, DiscriminatorCfg, Generator, GeneratorCfg};
pub use train::{
    lr_at, train_fcd, train_step, write_trace_csv, write_val_history_csv, AdversarialVariant,
    GanTrainConfig, GenAdvForm, LossRecord, SelectedCheckpoint, StratifiedSampler, TrainedGan,
};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { iteration: u64, component: &'static str },
    #[error("checkpoint incompatible with architecture: {0}")]
    CheckpointShape(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] crate::mask::MaskError),
}
