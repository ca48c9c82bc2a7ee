//! Stage-1 training: smooth-L1 on continuous attributes, cross-entropy on
//! class, binary cross-entropy on connectivity, early stop on validation
//! plateau.

use ndarray::{Array2, Ix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{
    agent_features, decode_graph, encode_graph, lane_features, AeConfig, A_FEAT, LANE_FEAT,
};
use super::{LatentScaler, LatentSet};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, GradAccum, Graph, ParamStore, Real};
use crate::scene::SceneGraph;

#[derive(Debug, Clone)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Loss weights: continuous agent attrs get per-column weights inside
    /// the smooth-L1; these scale the four loss families.
    pub w_agent: f64,
    pub w_lane: f64,
    pub w_class: f64,
    pub w_conn: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 4,
            w_agent: 1.0,
            w_lane: 1.0,
            w_class: 0.2,
            w_conn: 0.2,
        }
    }
}

/// Position columns weigh more than the rest so center errors dominate the
/// gradient signal.
fn agent_col_weights() -> Vec<f64> {
    let mut w = vec![1.0; A_FEAT - 3];
    w[0] = 8.0; // x
    w[1] = 8.0; // y
    w[2] = 2.0; // z
    w[3] = 3.0; // sin heading
    w[4] = 3.0; // cos heading
    w
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_agent_center_m: f64,
    pub val_lane_point_m: f64,
    pub val_heading_rad: f64,
    pub val_speed_mps: f64,
    pub val_class_accuracy: f64,
    pub val_connectivity_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl ReconstructionReport {
    pub fn last(&self) -> &EpochStats {
        self.epochs.last().expect("at least one epoch")
    }
}

struct Example<T: Real> {
    agent_feats: Array2<T>,
    lane_feats: Array2<T>,
    classes: Vec<usize>,
    conn_target: Array2<T>,
    conn_weight: Array2<T>,
}

fn prepare_example<T: Real>(scene: &SceneGraph) -> Example<T> {
    let n_l = scene.n_lanes();
    let mut conn_target = Array2::<T>::zeros((n_l, n_l));
    for &(a, b) in &scene.connectivity.edges {
        let ia = scene.lanes.iter().position(|l| l.lane_id == a).unwrap();
        let ib = scene.lanes.iter().position(|l| l.lane_id == b).unwrap();
        conn_target[[ia, ib]] = T::one();
    }
    // Sparse positives get upweighted; the diagonal is excluded entirely.
    let mut conn_weight = Array2::<T>::from_elem((n_l, n_l), T::one());
    for i in 0..n_l {
        conn_weight[[i, i]] = T::zero();
        for j in 0..n_l {
            if i != j && conn_target[[i, j]] == T::one() {
                conn_weight[[i, j]] = T::from_f(8.0);
            }
        }
    }
    Example {
        agent_feats: agent_features(scene),
        lane_feats: lane_features(scene),
        classes: scene.agents.iter().map(|a| a.class.index()).collect(),
        conn_target,
        conn_weight,
    }
}

fn example_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ex: &Example<T>,
    cfg: &AeConfig,
    tc: &AeTrainConfig,
) -> Result<crate::nn::Var> {
    let af = g.constant(ex.agent_feats.clone().into_dyn())?;
    let lf = g.constant(ex.lane_feats.clone().into_dyn())?;
    let (z_o, z_l) = encode_graph(g, store, af, lf, cfg)?;
    let heads = decode_graph(g, store, z_o, z_l, cfg)?;

    let n_attr = A_FEAT - 3;
    let pred_cont = g.slice_cols(heads.agent_attrs, 0, n_attr)?;
    let target_cont_arr = ex
        .agent_feats
        .slice(ndarray::s![.., 0..n_attr])
        .to_owned()
        .into_dyn();
    let target_cont = g.constant(target_cont_arr)?;
    let l_agent = g.smooth_l1(pred_cont, target_cont, &agent_col_weights())?;
    let l_agent = g.scale(l_agent, tc.w_agent)?;

    let lane_target = g.constant(ex.lane_feats.clone().into_dyn())?;
    let l_lane = g.smooth_l1(heads.lane_attrs, lane_target, &vec![1.0; LANE_FEAT])?;
    let l_lane = g.scale(l_lane, tc.w_lane)?;

    let logits = g.slice_cols(heads.agent_attrs, n_attr, 3)?;
    let l_class = g.cross_entropy(logits, &ex.classes)?;
    let l_class = g.scale(l_class, tc.w_class)?;

    let conn_t = g.constant(ex.conn_target.clone().into_dyn())?;
    let conn_w = g.constant(ex.conn_weight.clone().into_dyn())?;
    let l_conn = g.weighted_bce_with_logits(heads.conn_logits, conn_t, conn_w)?;
    let l_conn = g.scale(l_conn, tc.w_conn)?;

    let s1 = g.add(l_agent, l_lane)?;
    let s2 = g.add(l_class, l_conn)?;
    g.add(s1, s2)
}

/// Train the autoencoder on cropped scenes. `train` and `val` are canonical
/// crops (both layouts mixed by the caller).
pub fn train_autoencoder<T: Real>(
    store: &mut ParamStore<T>,
    train: &[SceneGraph],
    val: &[SceneGraph],
    cfg: &AeConfig,
    tc: &AeTrainConfig,
) -> Result<ReconstructionReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("empty train or val set".into()));
    }
    let train_ex: Vec<Example<T>> = train.par_iter().map(|s| prepare_example(s)).collect();
    let val_ex: Vec<Example<T>> = val.par_iter().map(|s| prepare_example(s)).collect();

    let mut report = ReconstructionReport {
        epochs: Vec::new(),
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..tc.epochs {
        let mut train_loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train_ex.chunks(tc.batch_size) {
            let results: Vec<Result<(Graph<T>, crate::nn::Var)>> = chunk
                .par_iter()
                .map(|ex| {
                    let mut g = Graph::<T>::new();
                    let loss = example_loss(&mut g, store, ex, cfg, tc)?;
                    Ok((g, loss))
                })
                .collect();
            let mut acc = GradAccum::new();
            let mut batch_loss = 0.0;
            for r in results {
                let (g, loss) = r?;
                let lv = g.value(loss)[[0]].to_f();
                if !lv.is_finite() {
                    return Err(Error::NonFinite { op: "ae train loss" });
                }
                batch_loss += lv;
                let grads = g.backward(loss)?;
                acc.absorb(&g, &grads);
            }
            store.adam_step(&acc, &tc.adam);
            train_loss_sum += batch_loss / chunk.len() as f64;
            batches += 1;
        }

        let stats = validate(store, val, &val_ex, cfg, tc, epoch, train_loss_sum / batches as f64)?;
        let val_loss = stats.val_loss;
        report.epochs.push(stats);
        if val_loss + 1e-5 < best_val {
            best_val = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

fn validate<T: Real>(
    store: &ParamStore<T>,
    val_scenes: &[SceneGraph],
    val_ex: &[Example<T>],
    cfg: &AeConfig,
    tc: &AeTrainConfig,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochStats> {
    let per: Vec<Result<(f64, f64, f64, f64, f64, f64, f64)>> = val_ex
        .par_iter()
        .zip(val_scenes.par_iter())
        .map(|(ex, _scene)| {
            let mut g = Graph::<T>::new();
            let loss = example_loss(&mut g, store, ex, cfg, tc)?;
            let loss_v = g.value(loss)[[0]].to_f();

            // Re-run heads for attribute-level errors.
            let mut g2 = Graph::<T>::new();
            let af = g2.constant(ex.agent_feats.clone().into_dyn())?;
            let lf = g2.constant(ex.lane_feats.clone().into_dyn())?;
            let (z_o, z_l) = encode_graph(&mut g2, store, af, lf, cfg)?;
            let heads = decode_graph(&mut g2, store, z_o, z_l, cfg)?;
            let pred_a = g2.value(heads.agent_attrs).clone().into_dimensionality::<Ix2>().unwrap();
            let pred_l = g2.value(heads.lane_attrs).clone().into_dimensionality::<Ix2>().unwrap();
            let logits = g2.value(heads.conn_logits).clone().into_dimensionality::<Ix2>().unwrap();

            let n_o = ex.agent_feats.nrows();
            let mut center = 0.0;
            let mut heading = 0.0;
            let mut speed = 0.0;
            let mut class_hits = 0usize;
            for i in 0..n_o {
                let dx = (pred_a[[i, 0]].to_f() - ex.agent_feats[[i, 0]].to_f()) * 32.0;
                let dy = (pred_a[[i, 1]].to_f() - ex.agent_feats[[i, 1]].to_f()) * 32.0;
                center += (dx * dx + dy * dy).sqrt();
                let ph = pred_a[[i, 3]].to_f().atan2(pred_a[[i, 4]].to_f());
                let th = ex.agent_feats[[i, 3]].to_f().atan2(ex.agent_feats[[i, 4]].to_f());
                heading += crate::scene::normalize_heading(ph - th).abs();
                speed += ((pred_a[[i, 8]].to_f() - ex.agent_feats[[i, 8]].to_f()) * 15.0).abs();
                let pc = (9..12)
                    .max_by(|&a, &b| pred_a[[i, a]].partial_cmp(&pred_a[[i, b]]).unwrap())
                    .unwrap()
                    - 9;
                if pc == ex.classes[i] {
                    class_hits += 1;
                }
            }
            let n_l = ex.lane_feats.nrows();
            let mut lane_pt = 0.0;
            for i in 0..n_l {
                for k in 0..crate::scene::LANE_POINTS {
                    let dx = (pred_l[[i, 3 * k]].to_f() - ex.lane_feats[[i, 3 * k]].to_f()) * 32.0;
                    let dy =
                        (pred_l[[i, 3 * k + 1]].to_f() - ex.lane_feats[[i, 3 * k + 1]].to_f()) * 32.0;
                    lane_pt += (dx * dx + dy * dy).sqrt();
                }
            }
            let mut conn_hits = 0usize;
            let mut conn_total = 0usize;
            for i in 0..n_l {
                for j in 0..n_l {
                    if i == j {
                        continue;
                    }
                    conn_total += 1;
                    let pred_edge = logits[[i, j]].to_f() > 0.0;
                    let true_edge = ex.conn_target[[i, j]] == T::one();
                    if pred_edge == true_edge {
                        conn_hits += 1;
                    }
                }
            }
            Ok((
                loss_v,
                center / n_o as f64,
                lane_pt / (n_l * crate::scene::LANE_POINTS) as f64,
                heading / n_o as f64,
                speed / n_o as f64,
                class_hits as f64 / n_o as f64,
                if conn_total == 0 {
                    1.0
                } else {
                    conn_hits as f64 / conn_total as f64
                },
            ))
        })
        .collect();

    let mut sums = [0.0f64; 7];
    let n = per.len() as f64;
    for r in per {
        let (a, b, c, d, e, f, g) = r?;
        for (s, v) in sums.iter_mut().zip([a, b, c, d, e, f, g]) {
            *s += v;
        }
    }
    Ok(EpochStats {
        epoch,
        train_loss,
        val_loss: sums[0] / n,
        val_agent_center_m: sums[1] / n,
        val_lane_point_m: sums[2] / n,
        val_heading_rad: sums[3] / n,
        val_speed_mps: sums[4] / n,
        val_class_accuracy: sums[5] / n,
        val_connectivity_accuracy: sums[6] / n,
    })
}

/// Encode every scene and fit the latent standardizer.
pub fn fit_scaler<T: Real>(
    store: &ParamStore<T>,
    scenes: &[SceneGraph],
    cfg: &AeConfig,
) -> Result<LatentScaler<T>> {
    let latents: Vec<LatentSet<T>> = scenes
        .par_iter()
        .map(|s| super::model::encode_scene(store, s, cfg))
        .collect::<Result<_>>()?;
    LatentScaler::fit(&latents)
}
