//! Mask-conditioned latent diffusion for capsule-endoscopy-style frames.

pub mod autoencoder;
pub mod checkpoint;
pub mod condunet;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod eval;
pub mod maskpipe;
pub mod sampler;
pub mod seed;
pub mod trainer;

#[cfg(test)]
mod testutil;
