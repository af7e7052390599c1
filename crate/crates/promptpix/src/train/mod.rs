//! Deterministic multi-task training: weighted batch assembly with aligned
//! crops, an L1 objective, decoupled weight-decay moment updates, versioned
//! checkpoints, and a resumable loop whose trajectory depends only on
//! `(config, corpus, seed)`.

pub mod adamw;
pub mod checkpoint;
pub mod trainer;

pub use adamw::AdamW;
pub use checkpoint::{digest_file, Checkpoint};
pub use trainer::{
    l1_loss, pick_task, sample_batch, train_step, Batch, LoadedCorpus, LrSchedule, StepStats,
    TrainConfig, Trainer,
};
