//! Optimization: tri-stage schedule, Adam, gradient accumulation,
//! checkpointing and resuming.

mod adam;
mod config;
mod schedule;
mod trainer;

pub use adam::{Adam, BETA1, BETA2, EPS};
pub use config::{ModelPreset, TrainConfig, KEYS};
pub use schedule::{tri_stage_lr, TriStage};
pub use trainer::{
    read_log, resume, train, RunOutcome, TrainLogRecord, Trainer, BEST_CHECKPOINT, LATEST_CHECKPOINT, LOG_FILE,
    LOG_HEADER,
};

#[cfg(test)]
mod tests;
