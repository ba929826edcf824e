//! Optimization of the joint objective in hybrid, segmentation-only and
//! registration-only modes, checkpointing, and the evaluation driver.

mod adam;
mod config;
mod evaluate;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{Mode, TrainConfig};
pub use evaluate::{evaluate, evaluate_sample, ExternalFields};
pub use trainer::{
    compute_gradients, epoch_order, objective, run, Checkpoint, LogRecord, Objective, RunOptions, StepOutput, Trainer,
};
