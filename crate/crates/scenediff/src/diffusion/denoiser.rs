//! Factorized-attention denoiser over stacked agent and lane tokens.
//!
//! Each block applies object-to-lane, lane-to-lane, lane-to-object and
//! object-to-object attention in that order. Dense conditioning enters every
//! attention component through a cross-global site shared per block; the
//! default tokens (counts, domain, timestep) drive AdaLN-Zero modulation at
//! every sublayer. All residual gates and the output heads start at zero, so
//! a fresh denoiser predicts exactly zero noise.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::schedule::NoiseSchedule;
use crate::ae::LatentSet;
use crate::control::{
    cross_global_attention, default_tokens_graph, init_cross_global_site, ConditionVars, D_COND,
};
use crate::error::{Error, Result};
use crate::nn::{normal, xavier, zeros, Graph, ParamStore, Real, Var};

#[derive(Debug, Clone, Copy)]
pub struct DenoiserConfig {
    /// Factorized attention block count N_DM.
    pub n_blocks: usize,
    /// Latent/token width d.
    pub d: usize,
    pub heads: usize,
    /// Global-latent token count L of each cross-global site.
    pub l_tokens: usize,
    pub mlp_ratio: usize,
    /// Dense-condition dropout probability during training.
    pub p_cfg: f64,
    pub max_agents: usize,
    pub max_lanes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_blocks: 4,
            d: 64,
            heads: 4,
            l_tokens: 8,
            mlp_ratio: 2,
            p_cfg: 0.1,
            max_agents: 32,
            max_lanes: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("denoiser needs at least one block".into()));
        }
        if self.l_tokens == 0 {
            return Err(Error::Config("cross-global needs at least one latent token".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config("d must be divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.p_cfg) {
            return Err(Error::Config("p_cfg outside [0, 1)".into()));
        }
        Ok(())
    }
}

const STAGES: [&str; 4] = ["o2l", "l2l", "l2o", "o2o"];

pub fn init_denoiser<T: Real>(store: &mut ParamStore<T>, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.insert("dm.in_o.w", xavier(rng, d, d));
    store.insert("dm.in_o.b", zeros(&[d]));
    store.insert("dm.in_l.w", xavier(rng, d, d));
    store.insert("dm.in_l.b", zeros(&[d]));
    for blk in 0..cfg.n_blocks {
        let bp = format!("dm.blk{blk}");
        init_cross_global_site(store, &format!("{bp}.cg"), d, cfg.l_tokens, rng);
        for stage in STAGES {
            let sp = format!("{bp}.{stage}");
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("{sp}.attn.{name}"), xavier(rng, d, d));
            }
            store.insert(&format!("{sp}.kv_ln.g"), ArrayD::from_elem(IxDyn(&[d]), T::one()));
            store.insert(&format!("{sp}.kv_ln.b"), zeros(&[d]));
            // AdaLN-Zero modulation: zero-init scale/shift/gate projection.
            store.insert(&format!("{sp}.mod.w"), zeros(&[D_COND, 3 * d]));
            store.insert(&format!("{sp}.mod.b"), zeros(&[3 * d]));
        }
        for mlp in ["mlp_o", "mlp_l"] {
            let mp = format!("{bp}.{mlp}");
            let hidden = d * cfg.mlp_ratio;
            store.insert(&format!("{mp}.w1"), xavier(rng, d, hidden));
            store.insert(&format!("{mp}.b1"), zeros(&[hidden]));
            store.insert(&format!("{mp}.w2"), xavier(rng, hidden, d));
            store.insert(&format!("{mp}.b2"), zeros(&[d]));
            store.insert(&format!("{mp}.mod.w"), zeros(&[D_COND, 3 * d]));
            store.insert(&format!("{mp}.mod.b"), zeros(&[3 * d]));
        }
    }
    // Zero-init heads: a fresh denoiser predicts exactly zero noise.
    store.insert("dm.out_o.w", zeros(&[d, d]));
    store.insert("dm.out_o.b", zeros(&[d]));
    store.insert("dm.out_l.w", zeros(&[d, d]));
    store.insert("dm.out_l.b", zeros(&[d]));
    store.insert("ctl.null_token", normal(rng, &[d], 0.02));
}

/// Modulation triplet from the conditioning vector (1 x d_c).
fn modulation<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cond: Var,
    d: usize,
) -> Result<(Var, Var, Var)> {
    let w = store.param(g, &format!("{prefix}.mod.w"))?;
    let b = store.param(g, &format!("{prefix}.mod.b"))?;
    let act = g.silu(cond)?;
    let m = g.linear(act, w, b)?;
    let take = |g: &mut Graph<T>, start: usize| -> Result<Var> {
        let s = g.slice_cols(m, start, d)?;
        g.reshape(s, &[d])
    };
    let scale = take(g, 0)?;
    let shift = take(g, d)?;
    let gate = take(g, 2 * d)?;
    Ok((scale, shift, gate))
}

fn modulated_norm<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    scale: Var,
    shift: Var,
    d: usize,
) -> Result<Var> {
    let ones = g.constant(ArrayD::from_elem(IxDyn(&[d]), T::one()))?;
    let zeros_v = g.constant(ArrayD::zeros(IxDyn(&[d])))?;
    let n = g.layer_norm(x, ones, zeros_v)?;
    let s1 = g.add_scalar(scale, 1.0)?;
    let scaled = g.scale_cols(n, s1)?;
    g.add_bias(scaled, shift)
}

/// One factorized attention stage with cross-global injection.
///
/// Queries come from `x_q`, keys/values from `x_kv` (plain-normalized when it
/// is a different token set). The self-attention and cross-global outputs are
/// fused and gated back onto `x_q`.
#[allow(clippy::too_many_arguments)]
fn attention_stage<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    stage_prefix: &str,
    cg_prefix: &str,
    x_q: Var,
    x_kv: Option<Var>,
    dense: Option<Var>,
    cond: Var,
    cfg: &DenoiserConfig,
) -> Result<Var> {
    let d = cfg.d;
    let (scale, shift, gate) = modulation(g, store, stage_prefix, cond, d)?;
    let h_q = modulated_norm(g, x_q, scale, shift, d)?;
    let h_kv = match x_kv {
        None => h_q,
        Some(kv) => {
            let kg = store.param(g, &format!("{stage_prefix}.kv_ln.g"))?;
            let kb = store.param(g, &format!("{stage_prefix}.kv_ln.b"))?;
            g.layer_norm(kv, kg, kb)?
        }
    };
    let mha = crate::nn::MhaParams {
        wq: store.param(g, &format!("{stage_prefix}.attn.wq"))?,
        wk: store.param(g, &format!("{stage_prefix}.attn.wk"))?,
        wv: store.param(g, &format!("{stage_prefix}.attn.wv"))?,
        wo: Some(store.param(g, &format!("{stage_prefix}.attn.wo"))?),
    };
    let sa = crate::nn::multi_head_attention(g, h_q, h_kv, &mha, cfg.heads, None)?;
    let ca = cross_global_attention(g, store, cg_prefix, h_q, dense, cfg.heads)?;
    let fused = g.add(sa, ca)?;
    let gated = g.scale_cols(fused, gate)?;
    g.add(x_q, gated)
}

fn mlp_stage<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cond: Var,
    cfg: &DenoiserConfig,
) -> Result<Var> {
    let d = cfg.d;
    let (scale, shift, gate) = modulation(g, store, prefix, cond, d)?;
    let h = modulated_norm(g, x, scale, shift, d)?;
    let w1 = store.param(g, &format!("{prefix}.w1"))?;
    let b1 = store.param(g, &format!("{prefix}.b1"))?;
    let w2 = store.param(g, &format!("{prefix}.w2"))?;
    let b2 = store.param(g, &format!("{prefix}.b2"))?;
    let m = g.linear(h, w1, b1)?;
    let m = g.silu(m)?;
    let m = g.linear(m, w2, b2)?;
    let gated = g.scale_cols(m, gate)?;
    g.add(x, gated)
}

/// Graph-level denoiser forward: noisy latents in, predicted noise out.
pub fn denoiser_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z_o: Var,
    z_l: Var,
    tau: usize,
    cond: &ConditionVars,
    cfg: &DenoiserConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let cvec = default_tokens_graph(g, store, cond.n_o, cond.n_l, cond.domain, tau)?;

    let wo_in = store.param(g, "dm.in_o.w")?;
    let bo_in = store.param(g, "dm.in_o.b")?;
    let wl_in = store.param(g, "dm.in_l.w")?;
    let bl_in = store.param(g, "dm.in_l.b")?;
    let mut x_o = g.linear(z_o, wo_in, bo_in)?;
    let mut x_l = g.linear(z_l, wl_in, bl_in)?;

    for blk in 0..cfg.n_blocks {
        let bp = format!("dm.blk{blk}");
        let cg = format!("{bp}.cg");
        x_o = attention_stage(g, store, &format!("{bp}.o2l"), &cg, x_o, Some(x_l), cond.dense, cvec, cfg)?;
        x_l = attention_stage(g, store, &format!("{bp}.l2l"), &cg, x_l, None, cond.dense, cvec, cfg)?;
        x_l = attention_stage(g, store, &format!("{bp}.l2o"), &cg, x_l, Some(x_o), cond.dense, cvec, cfg)?;
        x_o = attention_stage(g, store, &format!("{bp}.o2o"), &cg, x_o, None, cond.dense, cvec, cfg)?;
        x_o = mlp_stage(g, store, &format!("{bp}.mlp_o"), x_o, cvec, cfg)?;
        x_l = mlp_stage(g, store, &format!("{bp}.mlp_l"), x_l, cvec, cfg)?;
    }

    let wo_out = store.param(g, "dm.out_o.w")?;
    let bo_out = store.param(g, "dm.out_o.b")?;
    let wl_out = store.param(g, "dm.out_l.w")?;
    let bl_out = store.param(g, "dm.out_l.b")?;
    let eps_o = g.linear(x_o, wo_out, bo_out)?;
    let eps_l = g.linear(x_l, wl_out, bl_out)?;
    Ok((eps_o, eps_l))
}

/// Plain-array denoiser forward over a latent set.
pub fn denoiser_forward<T: Real>(
    store: &ParamStore<T>,
    z_tau: &LatentSet<T>,
    tau: usize,
    dense: Option<&Array2<T>>,
    n_o: usize,
    n_l: usize,
    domain: crate::scene::DomainTag,
    cfg: &DenoiserConfig,
) -> Result<LatentSet<T>> {
    let mut g = Graph::<T>::new();
    let z_o = g.constant(z_tau.z_o.clone().into_dyn())?;
    let z_l = g.constant(z_tau.z_l.clone().into_dyn())?;
    let dense_var = match dense {
        Some(f) => Some(g.constant(f.clone().into_dyn())?),
        None => None,
    };
    let cond = ConditionVars {
        dense: dense_var,
        modality: None,
        n_o,
        n_l,
        domain,
    };
    let (eps_o, eps_l) = denoiser_graph(&mut g, store, z_o, z_l, tau, &cond, cfg)?;
    Ok(LatentSet {
        z_o: g.value(eps_o).clone().into_dimensionality::<Ix2>().unwrap(),
        z_l: g.value(eps_l).clone().into_dimensionality::<Ix2>().unwrap(),
    })
}

/// Forward noising: Z_tau = sqrt(abar) Z_0 + sqrt(1 - abar) eps, blockwise.
pub fn forward_noise<T: Real>(
    z0: &LatentSet<T>,
    tau: usize,
    eps: &LatentSet<T>,
    sched: &NoiseSchedule,
) -> Result<LatentSet<T>> {
    if z0.z_o.dim() != eps.z_o.dim() || z0.z_l.dim() != eps.z_l.dim() {
        return Err(Error::Contract("forward_noise: noise shape mismatch".into()));
    }
    if tau == 0 || tau > sched.t {
        return Err(Error::Contract(format!("forward_noise: tau {tau} outside 1..={}", sched.t)));
    }
    let ab = sched.abar(tau);
    Ok(mix_latents(z0, eps, ab))
}

/// sqrt(abar) a + sqrt(1 - abar) b.
pub fn mix_latents<T: Real>(a: &LatentSet<T>, b: &LatentSet<T>, abar: f64) -> LatentSet<T> {
    let sa = T::from_f(abar.sqrt());
    let sb = T::from_f((1.0 - abar).sqrt());
    LatentSet {
        z_o: a.z_o.mapv(|x| x * sa) + &b.z_o.mapv(|x| x * sb),
        z_l: a.z_l.mapv(|x| x * sa) + &b.z_l.mapv(|x| x * sb),
    }
}
