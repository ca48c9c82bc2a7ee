//! AdaLN-Zero conditioning: layer norm, affine modulation from a conditioning
//! vector, and a zero-initialized residual gate.
//!
//! The modulation projection is zero-initialized, so scale = shift = gate = 0
//! and the block is exactly the identity at initialization.

use ndarray::{ArrayD, IxDyn};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::scalar::Real;
use crate::error::Result;

/// Register the zero-initialized modulation parameters for one AdaLN site.
pub fn init_adaln_site<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_c: usize, d: usize) {
    store.insert(
        &format!("{prefix}.mod_w"),
        ArrayD::zeros(IxDyn(&[d_c, 3 * d])),
    );
    store.insert(&format!("{prefix}.mod_b"), ArrayD::zeros(IxDyn(&[3 * d])));
}

/// Apply one AdaLN-Zero block around `branch`:
///
/// (scale, shift, gate) = W . silu(cond) + b
/// h = LN(x) * (1 + scale) + shift
/// out = x + gate * branch(h)
///
/// `cond` is a 1 x d_c row matrix.
pub fn adaln_zero<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cond: Var,
    branch: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let (_, d) = g.dims2(x, "adaln_zero")?;
    let w = store.param(g, &format!("{prefix}.mod_w"))?;
    let b = store.param(g, &format!("{prefix}.mod_b"))?;
    let act = g.silu(cond)?;
    let modv = g.linear(act, w, b)?; // 1 x 3d
    let scale = take_slot(g, modv, 0, d)?;
    let shift = take_slot(g, modv, d, d)?;
    let gate = take_slot(g, modv, 2 * d, d)?;

    let ones = g.constant(ArrayD::from_elem(IxDyn(&[d]), T::one()))?;
    let zeros = g.constant(ArrayD::zeros(IxDyn(&[d])))?;
    let normed = g.layer_norm(x, ones, zeros)?;
    let scale1 = g.add_scalar(scale, 1.0)?;
    let scaled = g.scale_cols(normed, scale1)?;
    let h = g.add_bias(scaled, shift)?;

    let br = branch(g, h)?;
    let gated = g.scale_cols(br, gate)?;
    g.add(x, gated)
}

fn take_slot<T: Real>(g: &mut Graph<T>, modv: Var, start: usize, d: usize) -> Result<Var> {
    let s = g.slice_cols(modv, start, d)?;
    g.reshape(s, &[d])
}
