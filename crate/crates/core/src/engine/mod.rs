//! Model assembly, training with Adam, prediction and checkpoints.

mod config;
mod model;
mod optim;
mod predict;
mod state;
mod train;

pub use config::{Ablation, ModelConfig, Setup, TrainConfig};
pub use model::{Forward, MaskClip};
pub use optim::Adam;
pub use predict::{predict, predict_prepared, prepare, Prediction};
pub use state::{ModelState, FORMAT_VERSION, META_FILE, PARAMS_FILE};
pub use train::{train, EpochLog, StepLog, TrainLog, Trainer};
