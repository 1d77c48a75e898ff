//! Diffuse-and-denoise augmentation on exact Gaussian-mixture oracles.
//!
//! The crate covers forward/reverse diffusion with analytic and learned
//! scores, a small reverse-mode network engine, DiffAug and guidance
//! training, Jacobian analysis of the one-step denoiser, test-time
//! ensembles, certification, OOD scoring and guided sampling metrics.

pub mod analysis;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod digest;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gmm;
pub mod guided;
pub mod linalg;
pub mod nnet;
pub mod rng;
pub mod score;
pub mod training;

pub use error::{Error, Result};
