//! Optimization: Adam, the step learning-rate schedule, patch sampling and
//! the training loop.

mod adam;
mod config;
mod sampler;
mod trainer;

pub use adam::{AdamHyper, AdamState};
pub use config::{lr_schedule, TrainConfig};
pub use sampler::{sample_patches, Batch, ImagePair};
pub use trainer::{train, LogEntry, TrainReport};
