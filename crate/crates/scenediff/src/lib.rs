//! Vision-language controllable latent diffusion over vectorized driving
//! scenes: scene-graph autoencoding, conditional denoising with a
//! cross-global control mechanism, masked-denoising completion and
//! outpainting, behavior rollout, and controllability metrics.
//!
//! See the `examples/` directory for one runnable entry point per
//! capability, and the `scenediff` binary for the operational pipeline.

pub mod ae;
pub mod control;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod rollout;
pub mod scene;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

/// Tool version embedded into every written artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
