//! Pixel-space DDPM: noise schedule, conditional denoiser with a single
//! cross-attention block, re-weighted training and guided sampling.

mod model;
mod sample;
mod schedule;
mod train;

pub use model::{forward, timestep_features, Denoiser, DenoiserConfig, ForwardVars, NEW_TOKEN_STD};
pub use sample::{attention_map, sample, AttentionMap, SampleConfig, DEFAULT_GUIDANCE};
pub use schedule::{NoiseSchedule, DEFAULT_STEPS};
pub use train::{loss_graph, train, train_step, StepBatch, TrainConfig, TrainExample, TrainMode, TrainReport};
