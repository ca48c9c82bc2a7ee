//! Stage-2 latent diffusion: noise schedule, factorized-attention denoiser,
//! training objective with the collision penalty, CFG sampling, and masked
//! denoising.

mod denoiser;
mod loss;
mod sample;
mod schedule;
mod train;

pub use denoiser::{
    denoiser_forward, denoiser_graph, forward_noise, init_denoiser, mix_latents, DenoiserConfig,
};
pub use loss::{collision_penalty_graph, collision_penalty_value};
pub use sample::{cfg_predict, masked_denoise, sample, sample_latents_only, ModelBundle, TokenMask};
pub use schedule::{make_schedule, w_of_abar, NoiseSchedule, ScheduleKind};
pub use train::{
    gaussian_like, plain_ddpm_loss, train_diffusion, DiffTrainConfig, StepLog, TrainItem,
    TrainStats,
};
