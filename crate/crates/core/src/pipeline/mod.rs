//! End-to-end model assembly: configuration, parameters, the
//! autoregressive forward pass, loss, optimization, and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::{load_for_config, read_checkpoint, write_checkpoint};
pub use config::{ModelConfig, StepSchedule, ENCODER_STRIDE};
pub use loss::{si_log_pure, si_log_taped, si_log_total, SILOG_ALPHA, SILOG_BETA};
pub use model::{Dar, Forward};
pub use optim::{AdamW, AdamWConfig};
pub use params::{bind, init_params, BoundModel, ParamStore};
pub use train::{train_step, StepOutcome, TrainSample};
