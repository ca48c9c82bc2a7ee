//! f_count: attention-based regressor predicting (N_o, N_l) from dense
//! conditioning tokens. Two learned query tokens attend over F; MLP heads on
//! the attended queries emit non-negative real counts via softplus.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{normal, xavier, zeros, Graph, ParamStore, Real, Var};

const HEADS: usize = 2;

pub fn init_f_count<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut ChaCha8Rng) {
    store.insert("ctl.count.queries", normal(rng, &[2, d], 0.5));
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("ctl.count.{name}"), xavier(rng, d, d));
    }
    store.insert("ctl.count.mlp.w1", xavier(rng, d, d));
    store.insert("ctl.count.mlp.b1", zeros(&[d]));
    store.insert("ctl.count.mlp.w2", xavier(rng, d, 1));
    store.insert("ctl.count.mlp.b2", zeros(&[1]));
}

/// Raw real-valued count heads (agents, lanes), each shape [1].
pub fn count_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dense: Var,
) -> Result<(Var, Var)> {
    let queries = store.param(g, "ctl.count.queries")?;
    let wq = store.param(g, "ctl.count.wq")?;
    let wk = store.param(g, "ctl.count.wk")?;
    let wv = store.param(g, "ctl.count.wv")?;
    let wo = store.param(g, "ctl.count.wo")?;
    let qp = g.matmul(queries, wq)?;
    let k = g.matmul(dense, wk)?;
    let v = g.matmul(dense, wv)?;
    let att = g.attention(qp, k, v, HEADS, None)?;
    let att = g.matmul(att, wo)?;

    let w1 = store.param(g, "ctl.count.mlp.w1")?;
    let b1 = store.param(g, "ctl.count.mlp.b1")?;
    let w2 = store.param(g, "ctl.count.mlp.w2")?;
    let b2 = store.param(g, "ctl.count.mlp.b2")?;
    let h = g.linear(att, w1, b1)?;
    let h = g.silu(h)?;
    let out = g.linear(h, w2, b2)?; // 2 x 1
    let out = g.softplus(out)?;
    let n_o = g.slice_rows(out, 0, 1)?;
    let n_o = g.reshape(n_o, &[1])?;
    let n_l = g.slice_rows(out, 1, 1)?;
    let n_l = g.reshape(n_l, &[1])?;
    Ok((n_o, n_l))
}

/// Smooth-L1 training loss against true counts. The dense tokens are passed
/// in detached (constants), so the count objective cannot distort control
/// features.
pub fn train_count_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dense_detached: Var,
    true_n_o: usize,
    true_n_l: usize,
) -> Result<Var> {
    let (n_o, n_l) = count_forward(g, store, dense_detached)?;
    let row_o = g_reshape_row(g, n_o)?;
    let row_l = g_reshape_row(g, n_l)?;
    let pred = g.concat_rows(&[row_o, row_l])?;
    let target = g.constant(
        ndarray::arr2(&[[T::from_f(true_n_o as f64)], [T::from_f(true_n_l as f64)]]).into_dyn(),
    )?;
    g.smooth_l1(pred, target, &[1.0])
}

fn g_reshape_row<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    g.reshape(v, &[1, 1])
}

/// Inference rounding rule: nearest integer clamped to [1, capacity].
pub fn clamp_count(raw: f64, capacity: usize) -> usize {
    (raw.round() as i64).clamp(1, capacity as i64) as usize
}

/// Predict integer counts from plain dense tokens.
pub fn predict_counts<T: Real>(
    store: &ParamStore<T>,
    dense: &ndarray::Array2<T>,
    max_agents: usize,
    max_lanes: usize,
) -> Result<(usize, usize)> {
    let mut g = Graph::<T>::new();
    let f = g.constant(dense.clone().into_dyn())?;
    let (n_o, n_l) = count_forward(&mut g, store, f)?;
    Ok((
        clamp_count(g.value(n_o)[[0]].to_f(), max_agents),
        clamp_count(g.value(n_l)[[0]].to_f(), max_lanes),
    ))
}
