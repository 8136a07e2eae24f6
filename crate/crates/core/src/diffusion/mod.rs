//! Residual diffusion: schedule, U-Net denoiser, training objective, DDIM
//! sampling and checkpoints.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;
mod unet;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointHeader, OptimizerHeader, MAGIC, SCHEMA_VERSION,
};
pub use model::{EpsModel, ModelConfig, TextSrModel};
pub use sample::ddim_sample;
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleConfig};
pub use train::{training_loss, training_step, DiffusionBatch, DropoutConfig, Trainer, TrainingPair};
pub use unet::{DenoiserConfig, TextInput, Unet, UnetInput};
