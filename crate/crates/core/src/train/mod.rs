//! Optimization: configuration, SGD with momentum, clipping, the epoch
//! loop with early stopping, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optim::{clip_gradients, global_grad_norm, Sgd};
pub use trainer::{dev_metric, train_loop, EarlyStopping, EpochRecord, TrainOutcome};
