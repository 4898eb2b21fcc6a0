//! Tiny conditional diffusion transformer trained with flow matching.

pub mod config;
pub mod model;
pub mod params;
pub mod sample;
pub mod train;

pub use config::DitConfig;
pub use model::{forward_tokens, grid_tokens, rope_tables, velocity, Bound, TokenSeq};
pub use params::{ModelParams, ParamVec};
pub use sample::{generate, generate_from_noise, seeded_noise, SamplerOptions};
pub use train::{
    flow_grad, flow_loss, sample_loss_grad, train, FlowSample, LossTape, Optimizer, OptimizerConfig, OptimizerKind,
    TrainConfig, TrainOutcome,
};
