//! Optimizer, learning-rate schedule, training loop and latency measurement.

mod adamw;
mod latency;
mod schedule;
mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use latency::{measure_inference, LatencyStats};
pub use schedule::{cosine_lr, ScheduleConfig};
pub use train::{evaluate, evaluate_many, predict, predict_many, train, EpochLog, HeadAccuracy, TrainConfig, TrainLog, TrainOutcome};
