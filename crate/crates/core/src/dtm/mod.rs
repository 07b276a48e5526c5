//! The digital-twin model: an encoder-decoder transformer that forecasts
//! the next `h` states and reconstructs its own forecast.

mod checkpoint;
pub mod loss;
mod model;
pub mod nn;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{loss_forecast, loss_recon, loss_total, LossBreakdown};
pub use model::{DecoderLayer, DtModel, EncoderLayer, Forward, Mode, ModelConfig};
pub use train::{evaluate_loss, train, train_with, Adam, EpochRecord, TrainConfig, TrainHistory};
