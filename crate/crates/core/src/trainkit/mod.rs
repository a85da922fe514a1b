//! Training machinery: optimizer, schedule, dual-view step, checkpoints,
//! and the 64-bit gradient audit of the full objective.

mod adamw;
mod audit;
mod checkpoint;
mod schedule;
mod trainer;

pub use adamw::{adamw_step, AdamWConfig, OptimError, OptimizerState};
pub use audit::{full_loss_grad_audit, micro_audit_backbone, micro_audit_gen, micro_audit_train};
pub use checkpoint::{
    crc32, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CKPT_MAGIC, CKPT_VERSION,
};
pub use schedule::lr_schedule;
pub use trainer::{
    compute_batch_loss, epoch_order, DocMode, StepLog, TrainConfig, TrainError, TrainStepError,
    Trainer,
};
