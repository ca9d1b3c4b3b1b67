//! The convolutional voting network: parameters, forward and backward
//! passes, loss, optimizer, training loop and weight files.

pub mod adam;
pub mod io;
pub mod loss;
pub mod model;
pub mod params;
pub mod real;
pub mod train;

pub use adam::{adam_update, lr_schedule, AdamConfig, LrSchedule, TrainState};
pub use io::{load_params, save_params};
pub use loss::{loss, LossOutput};
pub use model::{backward, forward, update_running_stats, Batch, Mode, Output, PointPrediction};
pub use params::{Fusion, Gradients, ModelConfig, ModelParams};
pub use real::Real;
pub use train::{train, TrainConfig, TrainReport};
