//! Differentiable computation primitives: a tape-based autodiff graph,
//! attention, normalization and modulation blocks, Adam, checkpoints, and
//! finite-difference gradient verification.

mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod modulation;
mod params;
mod scalar;

pub use attention::{
    attention_probe, multi_head_attention, sincos_grid, sincos_positional_embedding, sincos_rows,
    sincos_vector, MhaParams,
};
pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_general};
pub use graph::{Grads, Graph, Var};
pub use modulation::{adaln_zero, init_adaln_site};
pub use params::{hex, normal, xavier, zeros, AdamConfig, GradAccum, ParamStore};
pub use scalar::Real;
