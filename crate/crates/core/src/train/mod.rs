//! Optimization, the training loop and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use trainer::{evaluate, EpochStats, EvalReport, Segmenter, TrainConfig, Trainer};
