//! Transformer autoencoder over scene tokens: one token per agent, one per
//! lane. The architecture is set-equivariant: no token-order embedding, only
//! a type embedding shared by all tokens of a kind.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::LatentSet;
use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, normal, xavier, zeros, Graph, MhaParams, ParamStore, Real, Var,
};
use crate::scene::{
    layout_bounds, normalize_heading, AgentBox, AgentClass, ConnectivityGraph, DomainTag,
    LanePolyline, LayoutKind, SceneGraph, LANE_POINTS, SCENE_SCHEMA_VERSION,
};

/// Continuous agent attributes (9) plus class one-hot (3).
pub const A_FEAT: usize = 12;
/// Lane polyline attributes: LANE_POINTS x (x, y, z).
pub const LANE_FEAT: usize = LANE_POINTS * 3;

const POS_SCALE: f64 = 32.0;
const Z_SCALE: f64 = 8.0;
const SPEED_SCALE: f64 = 15.0;

#[derive(Debug, Clone, Copy)]
pub struct AeConfig {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_agents: usize,
    pub max_lanes: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            d: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            max_agents: 32,
            max_lanes: 32,
        }
    }
}

// ---- feature normalization ----

/// Normalized per-agent feature rows.
pub fn agent_features<T: Real>(scene: &SceneGraph) -> Array2<T> {
    let mut out = Array2::<T>::zeros((scene.agents.len(), A_FEAT));
    for (i, a) in scene.agents.iter().enumerate() {
        let row = [
            a.x / POS_SCALE,
            a.y / POS_SCALE,
            a.z / Z_SCALE,
            a.heading.sin(),
            a.heading.cos(),
            a.length.ln(),
            a.width.ln(),
            a.height.ln(),
            a.speed / SPEED_SCALE,
        ];
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = T::from_f(v);
        }
        out[[i, 9 + a.class.index()]] = T::one();
    }
    out
}

/// Normalized per-lane feature rows (flattened resampled polylines).
pub fn lane_features<T: Real>(scene: &SceneGraph) -> Array2<T> {
    let mut out = Array2::<T>::zeros((scene.lanes.len(), LANE_FEAT));
    for (i, l) in scene.lanes.iter().enumerate() {
        for (k, p) in l.points.iter().enumerate() {
            out[[i, 3 * k]] = T::from_f(p[0] / POS_SCALE);
            out[[i, 3 * k + 1]] = T::from_f(p[1] / POS_SCALE);
            out[[i, 3 * k + 2]] = T::from_f(p[2] / Z_SCALE);
        }
    }
    out
}

fn agent_from_row<T: Real>(row: &[T]) -> AgentBox {
    let v = |i: usize| row[i].to_f();
    let heading = normalize_heading(v(3).atan2(v(4)));
    let class_idx = (9..12)
        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
        .unwrap()
        - 9;
    AgentBox {
        x: v(0) * POS_SCALE,
        y: v(1) * POS_SCALE,
        z: v(2) * Z_SCALE,
        heading,
        length: v(5).clamp(-2.0, 2.2).exp(),
        width: v(6).clamp(-2.0, 2.2).exp(),
        height: v(7).clamp(-2.0, 2.2).exp(),
        speed: (v(8) * SPEED_SCALE).max(0.0),
        class: AgentClass::from_index(class_idx).unwrap(),
    }
}

fn lane_from_row<T: Real>(row: &[T], lane_id: u32) -> LanePolyline {
    let pts: Vec<[f64; 3]> = (0..LANE_POINTS)
        .map(|k| {
            [
                row[3 * k].to_f() * POS_SCALE,
                row[3 * k + 1].to_f() * POS_SCALE,
                row[3 * k + 2].to_f() * Z_SCALE,
            ]
        })
        .collect();
    // Resample so the spacing invariant holds for any finite latent input.
    LanePolyline::resampled(&pts, lane_id)
}

// ---- parameter initialization ----

pub fn init_autoencoder<T: Real>(store: &mut ParamStore<T>, cfg: &AeConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.insert("ae.enc.agent_in.w", xavier(rng, A_FEAT, d));
    store.insert("ae.enc.agent_in.b", zeros(&[d]));
    store.insert("ae.enc.lane_in.w", xavier(rng, LANE_FEAT, d));
    store.insert("ae.enc.lane_in.b", zeros(&[d]));
    store.insert("ae.enc.type_agent", normal(rng, &[d], 0.02));
    store.insert("ae.enc.type_lane", normal(rng, &[d], 0.02));
    for half in ["enc", "dec"] {
        for blk in 0..cfg.depth {
            init_block(store, &format!("ae.{half}.blk{blk}"), cfg, rng);
        }
    }
    store.insert("ae.dec.agent_out.w", xavier(rng, d, A_FEAT));
    store.insert("ae.dec.agent_out.b", zeros(&[A_FEAT]));
    store.insert("ae.dec.lane_out.w", xavier(rng, d, LANE_FEAT));
    store.insert("ae.dec.lane_out.b", zeros(&[LANE_FEAT]));
    store.insert("ae.dec.conn.w", normal(rng, &[d, d], 0.02));
    store.insert("ae.dec.conn.b", zeros(&[1]));
}

fn init_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &AeConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.attn.{name}"), xavier(rng, d, d));
    }
    store.insert(&format!("{prefix}.ln1.g"), ArrayD::from_elem(IxDyn(&[d]), T::one()));
    store.insert(&format!("{prefix}.ln1.b"), zeros(&[d]));
    store.insert(&format!("{prefix}.ln2.g"), ArrayD::from_elem(IxDyn(&[d]), T::one()));
    store.insert(&format!("{prefix}.ln2.b"), zeros(&[d]));
    let hidden = d * cfg.mlp_ratio;
    store.insert(&format!("{prefix}.mlp.w1"), xavier(rng, d, hidden));
    store.insert(&format!("{prefix}.mlp.b1"), zeros(&[hidden]));
    store.insert(&format!("{prefix}.mlp.w2"), xavier(rng, hidden, d));
    store.insert(&format!("{prefix}.mlp.b2"), zeros(&[d]));
}

fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let ln1g = store.param(g, &format!("{prefix}.ln1.g"))?;
    let ln1b = store.param(g, &format!("{prefix}.ln1.b"))?;
    let h = g.layer_norm(x, ln1g, ln1b)?;
    let mha = MhaParams {
        wq: store.param(g, &format!("{prefix}.attn.wq"))?,
        wk: store.param(g, &format!("{prefix}.attn.wk"))?,
        wv: store.param(g, &format!("{prefix}.attn.wv"))?,
        wo: Some(store.param(g, &format!("{prefix}.attn.wo"))?),
    };
    let attn = multi_head_attention(g, h, h, &mha, heads, None)?;
    let x = g.add(x, attn)?;

    let ln2g = store.param(g, &format!("{prefix}.ln2.g"))?;
    let ln2b = store.param(g, &format!("{prefix}.ln2.b"))?;
    let h = g.layer_norm(x, ln2g, ln2b)?;
    let w1 = store.param(g, &format!("{prefix}.mlp.w1"))?;
    let b1 = store.param(g, &format!("{prefix}.mlp.b1"))?;
    let w2 = store.param(g, &format!("{prefix}.mlp.w2"))?;
    let b2 = store.param(g, &format!("{prefix}.mlp.b2"))?;
    let m = g.linear(h, w1, b1)?;
    let m = g.silu(m)?;
    let m = g.linear(m, w2, b2)?;
    g.add(x, m)
}

// ---- encoder / decoder graphs ----

/// Build the encoder inside a graph. Inputs are normalized feature matrices.
pub fn encode_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    agent_feats: Var,
    lane_feats: Var,
    cfg: &AeConfig,
) -> Result<(Var, Var)> {
    let (n_o, _) = g.dims2(agent_feats, "encode")?;
    let (n_l, _) = g.dims2(lane_feats, "encode")?;
    let aw = store.param(g, "ae.enc.agent_in.w")?;
    let ab = store.param(g, "ae.enc.agent_in.b")?;
    let lw = store.param(g, "ae.enc.lane_in.w")?;
    let lb = store.param(g, "ae.enc.lane_in.b")?;
    let ta = store.param(g, "ae.enc.type_agent")?;
    let tl = store.param(g, "ae.enc.type_lane")?;

    let ea = g.linear(agent_feats, aw, ab)?;
    let ea = g.add_bias(ea, ta)?;
    let el = g.linear(lane_feats, lw, lb)?;
    let el = g.add_bias(el, tl)?;
    let mut x = g.concat_rows(&[ea, el])?;
    for blk in 0..cfg.depth {
        x = transformer_block(g, store, &format!("ae.enc.blk{blk}"), x, cfg.heads)?;
    }
    let z_o = g.slice_rows(x, 0, n_o)?;
    let z_l = g.slice_rows(x, n_o, n_l)?;
    Ok((z_o, z_l))
}

pub struct DecodeHeads {
    pub agent_attrs: Var,
    pub lane_attrs: Var,
    /// N_l x N_l pairwise connectivity logits (diagonal is meaningless).
    pub conn_logits: Var,
}

/// Build the decoder inside a graph from latent tokens.
pub fn decode_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z_o: Var,
    z_l: Var,
    cfg: &AeConfig,
) -> Result<DecodeHeads> {
    let (n_o, _) = g.dims2(z_o, "decode")?;
    let (n_l, _) = g.dims2(z_l, "decode")?;
    let mut x = g.concat_rows(&[z_o, z_l])?;
    for blk in 0..cfg.depth {
        x = transformer_block(g, store, &format!("ae.dec.blk{blk}"), x, cfg.heads)?;
    }
    let h_o = g.slice_rows(x, 0, n_o)?;
    let h_l = g.slice_rows(x, n_o, n_l)?;

    let aw = store.param(g, "ae.dec.agent_out.w")?;
    let ab = store.param(g, "ae.dec.agent_out.b")?;
    let agent_attrs = g.linear(h_o, aw, ab)?;
    let lw = store.param(g, "ae.dec.lane_out.w")?;
    let lb = store.param(g, "ae.dec.lane_out.b")?;
    let lane_attrs = g.linear(h_l, lw, lb)?;

    // Pairwise bilinear connectivity scores over decoded lane tokens.
    let cw = store.param(g, "ae.dec.conn.w")?;
    let cb = store.param(g, "ae.dec.conn.b")?;
    let proj = g.matmul(h_l, cw)?;
    let h_l_t = g.transpose(h_l)?;
    let scores = g.matmul(proj, h_l_t)?;
    let bias = broadcast_scalar_bias(g, cb, n_l)?;
    let conn_logits = g.add(scores, bias)?;

    Ok(DecodeHeads {
        agent_attrs,
        lane_attrs,
        conn_logits,
    })
}

fn broadcast_scalar_bias<T: Real>(g: &mut Graph<T>, b: Var, n: usize) -> Result<Var> {
    // b is a [1] parameter; tile it to n x n via two rank-1 matmuls.
    let col = g.constant(ArrayD::from_elem(IxDyn(&[n, 1]), T::one()))?;
    let b_row = g.reshape(b, &[1, 1])?;
    let tall = g.matmul(col, b_row)?; // n x 1
    let row = g.constant(ArrayD::from_elem(IxDyn(&[1, n]), T::one()))?;
    g.matmul(tall, row)
}

// ---- plain-array entry points ----

/// Encode a cropped, normalized scene into latent tokens.
pub fn encode_scene<T: Real>(
    store: &ParamStore<T>,
    scene: &SceneGraph,
    cfg: &AeConfig,
) -> Result<LatentSet<T>> {
    if scene.n_agents() > cfg.max_agents {
        return Err(Error::Capacity(format!(
            "{} agents exceeds capacity {}",
            scene.n_agents(),
            cfg.max_agents
        )));
    }
    if scene.n_lanes() > cfg.max_lanes {
        return Err(Error::Capacity(format!(
            "{} lanes exceeds capacity {}",
            scene.n_lanes(),
            cfg.max_lanes
        )));
    }
    let mut g = Graph::<T>::new();
    let af = g.constant(agent_features::<T>(scene).into_dyn())?;
    let lf = g.constant(lane_features::<T>(scene).into_dyn())?;
    let (z_o, z_l) = encode_graph(&mut g, store, af, lf, cfg)?;
    Ok(LatentSet {
        z_o: g.value(z_o).clone().into_dimensionality::<Ix2>().unwrap(),
        z_l: g.value(z_l).clone().into_dimensionality::<Ix2>().unwrap(),
    })
}

/// Decode latent tokens to a scene graph.
///
/// Emits one agent per agent token and one lane per lane token; headings are
/// renormalized, extents clamped positive, class by argmax, connectivity by
/// thresholding pairwise logits at 0.5 probability. The agent nearest the
/// origin becomes the ego (index 0).
pub fn decode_latents<T: Real>(
    store: &ParamStore<T>,
    z: &LatentSet<T>,
    cfg: &AeConfig,
    layout: LayoutKind,
    domain: DomainTag,
) -> Result<SceneGraph> {
    z.validate()?;
    let mut g = Graph::<T>::new();
    let z_o = g.constant(z.z_o.clone().into_dyn())?;
    let z_l = g.constant(z.z_l.clone().into_dyn())?;
    let heads = decode_graph(&mut g, store, z_o, z_l, cfg)?;

    let attrs = g.value(heads.agent_attrs);
    let mut agents: Vec<AgentBox> = (0..z.n_agents())
        .map(|i| {
            let row: Vec<T> = (0..A_FEAT).map(|j| attrs[[i, j]]).collect();
            agent_from_row(&row)
        })
        .collect();
    // The model is set-equivariant, so no token is structurally the ego;
    // designate the agent nearest the origin.
    if !agents.is_empty() {
        let ego_idx = (0..agents.len())
            .min_by(|&i, &j| {
                let di = agents[i].x.hypot(agents[i].y);
                let dj = agents[j].x.hypot(agents[j].y);
                di.total_cmp(&dj)
            })
            .unwrap();
        agents.swap(0, ego_idx);
    }

    let lattrs = g.value(heads.lane_attrs);
    let lanes: Vec<LanePolyline> = (0..z.n_lanes())
        .map(|i| {
            let row: Vec<T> = (0..LANE_FEAT).map(|j| lattrs[[i, j]]).collect();
            lane_from_row(&row, i as u32)
        })
        .collect();

    let logits = g.value(heads.conn_logits);
    let mut edges = Vec::new();
    for i in 0..z.n_lanes() {
        for j in 0..z.n_lanes() {
            if i != j && logits[[i, j]].to_f() > 0.0 {
                edges.push((i as u32, j as u32));
            }
        }
    }

    Ok(SceneGraph {
        schema: SCENE_SCHEMA_VERSION,
        agents,
        lanes,
        connectivity: ConnectivityGraph { edges },
        layout,
        domain,
        bounds: layout_bounds(layout),
        original_pose: None,
    })
}
