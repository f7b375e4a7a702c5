//! Staged training: optimizer, plans, checkpoints, logs, and the stage
//! runners.

mod batch;
pub mod checkpoint;
pub mod log;
pub mod optim;
pub mod plan;
pub mod stages;

pub use batch::{epoch_batches, images_to_tensor, tensor_to_image, BatchCycler};
pub use checkpoint::Checkpoint;
pub use log::{LogEntry, RunLog, LOG_HEADER};
pub use optim::{AdamConfig, OptimizerState};
pub use plan::{Stage, StagePlan};
pub use stages::{
    classify_images, restore_images, restorer_from_checkpoint, run_classifier_finetune, run_classifier_train, run_prior_pretrain,
    run_restorer_finetune, StageOutput, StageReport,
};
