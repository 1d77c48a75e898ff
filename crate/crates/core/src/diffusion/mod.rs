//! Forward noising, one-step denoising and reverse-time sampling.

pub mod process;
pub mod sampler;
pub mod schedule;

pub use process::{
    denoise_batch, denoise_onestep, denoise_tape, diffuse_and_denoise, forward_diffuse,
    forward_diffuse_batch, row_noise, DenoisedBatch, DenoisedSample, NoisySample,
};
pub use sampler::{
    pc_sample, pc_sample_chains, pc_sample_model, reverse_sde_step, reverse_sde_step_with_noise,
    BatchScoreFn, PcConfig, ReverseStep,
};
pub use schedule::DiffusionSchedule;
