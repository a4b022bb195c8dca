//! Optimisation: configuration, Adam, batch construction and the fit loop.

pub mod batch;
pub mod config;
pub mod fit;
pub mod optim;

pub use batch::{
    plan_batch, plan_epoch, sample_batch, Augmenter, Batch, BatchMode, BatchPlan, BatchSpec, Dataset, Utterance,
};
pub use config::{default_workers, Pairing, TrainConfig};
pub use fit::{fit, load_augmenter, EpochLog, FitOptions, FitOutcome, Trainer, Validation};
pub use optim::{adam_step, schedule_lr, OptimizerState, SchedulePolicy};
