//! End-to-end orchestration: synthesis, matching, training, inference,
//! evaluation and the gradient-check suite.

pub mod dataset;
pub mod experiments;
pub mod gradcheck;
pub mod matching;
pub mod run;
pub mod train;

pub use train::{dehaze_sequence, Precision, TrainConfig, Trainer, TrainingSet};
