//! Cross-global control: plain cross-attention fused with a latent-token
//! global-context branch through a zero-initialized tanh gate.
//!
//! Both branches share the same key/value (and query) projections, so the
//! extra parameter cost over plain cross-attention is exactly the L x d
//! latent tokens plus one gate scalar. An empty dense condition is handled
//! by a single learned null token, keeping the graph shape static across
//! classifier-free-guidance branches.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{attention_probe, normal, xavier, zeros, Graph, ParamStore, Real, Var};

/// Register one cross-global site. `l_tokens` is the latent token count L.
pub fn init_cross_global_site<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    l_tokens: usize,
    rng: &mut ChaCha8Rng,
) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{name}"), xavier(rng, d, d));
    }
    store.insert(&format!("{prefix}.latents"), normal(rng, &[l_tokens, d], 0.02));
    // Gate starts at zero: tanh(0) = 0, so the site reduces exactly to
    // plain cross-attention at initialization.
    store.insert(&format!("{prefix}.gate"), zeros(&[1]));
}

/// Y = W_o (Y1 + tanh(g) Y2) with
///   Y1 = Attn(Q W_q, K(F), V(F))
///   T~ = Attn(T W_q, K(F), V(F))
///   Y2 = Attn(Q W_q, K(T~), V(T~))
///
/// `dense` of None attends against the shared learned null token.
pub fn cross_global_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    queries: Var,
    dense: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let wq = store.param(g, &format!("{prefix}.wq"))?;
    let wk = store.param(g, &format!("{prefix}.wk"))?;
    let wv = store.param(g, &format!("{prefix}.wv"))?;
    let wo = store.param(g, &format!("{prefix}.wo"))?;
    let latents = store.param(g, &format!("{prefix}.latents"))?;
    let gate = store.param(g, &format!("{prefix}.gate"))?;

    let f = match dense {
        Some(f) => f,
        None => {
            let null = store.param(g, "ctl.null_token")?;
            g.reshape(null, &[1, store.get("ctl.null_token")?.len()])?
        }
    };

    let qp = g.matmul(queries, wq)?;
    let kf = g.matmul(f, wk)?;
    let vf = g.matmul(f, wv)?;
    let y1 = g.attention(qp, kf, vf, heads, None)?;

    let tq = g.matmul(latents, wq)?;
    let t_tilde = g.attention(tq, kf, vf, heads, None)?;
    let kt = g.matmul(t_tilde, wk)?;
    let vt = g.matmul(t_tilde, wv)?;
    let y2 = g.attention(qp, kt, vt, heads, None)?;

    let gt = g.tanh(gate)?;
    let gated = g.scale_by(y2, gt)?;
    let combined = g.add(y1, gated)?;
    g.matmul(combined, wo)
}

/// Attention-score multiplication count of the global branch:
/// d * (L * N_k) for the latent summary plus d * (N_q * L) for reading it.
pub fn cross_global_score_mults(n_q: usize, n_k: usize, l_tokens: usize, d: usize) -> u64 {
    (d * (l_tokens * n_k + n_q * l_tokens)) as u64
}

/// Plain-array probe that *measures* branch-2 score multiplications by
/// counting every multiply in the score loops, alongside the output.
pub fn cross_global_probe<T: Real>(
    q: &Array2<T>,
    f: &Array2<T>,
    wq: &Array2<T>,
    wk: &Array2<T>,
    wv: &Array2<T>,
    wo: &Array2<T>,
    latents: &Array2<T>,
    gate: f64,
    heads: usize,
) -> (Array2<T>, u64) {
    let qp = q.dot(wq);
    let kf = f.dot(wk);
    let vf = f.dot(wv);
    let (y1, _) = attention_probe(&qp, &kf, &vf, heads, None);

    let mut score_mults: u64 = 0;
    let tq = latents.dot(wq);
    let t_tilde = counted_attention(&tq, &kf, &vf, heads, &mut score_mults);
    let kt = t_tilde.dot(wk);
    let vt = t_tilde.dot(wv);
    let y2 = counted_attention(&qp, &kt, &vt, heads, &mut score_mults);

    let gt = T::from_f(gate.tanh());
    let combined = &y1 + &y2.mapv(|x| x * gt);
    (combined.dot(wo), score_mults)
}

/// Attention with an explicit multiply counter over the score computation.
fn counted_attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    mults: &mut u64,
) -> Array2<T> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = T::from_f(1.0 / (dh as f64).sqrt());
    let mut out = Array2::<T>::zeros((q.nrows(), d));
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., c.clone()]);
        let kh = k.slice(ndarray::s![.., c.clone()]);
        let vh = v.slice(ndarray::s![.., c.clone()]);
        let mut s = Array2::<T>::zeros((q.nrows(), k.nrows()));
        for i in 0..q.nrows() {
            for j in 0..k.nrows() {
                let mut acc = T::zero();
                for x in 0..dh {
                    acc = acc + qh[[i, x]] * kh[[j, x]];
                    *mults += 1;
                }
                s[[i, j]] = acc * scale;
            }
        }
        for mut row in s.rows_mut() {
            let max = row.fold(T::neg_infinity(), |a, &x| if x > a { x } else { a });
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        out.slice_mut(ndarray::s![.., c]).assign(&s.dot(&vh));
    }
    out
}
