//! Trainable grid detector with its own gradient engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::{base_loss, detect, encode_frames, forward, DetectorParams, ModelConfig};
pub use train::{train, train_with_hook, Optimizer, StepMetrics, TrainConfig, TrainMode, TrainOutput};
