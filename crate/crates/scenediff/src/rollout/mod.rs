//! Deterministic behavior rollout (kinematic lane following), scene
//! extension by forward outpainting, and wireframe control-sequence export.

use serde::{Deserialize, Serialize};

use crate::ae::encode_scene;
use crate::control::ConditionSpec;
use crate::diffusion::{masked_denoise, ModelBundle, TokenMask};
use crate::error::{Error, Result};
use crate::nn::Real;
use crate::scene::{
    bev_to_camera_wireframe, normalize_heading, AgentClass, Bounds, CameraModel, LanePolyline,
    LayoutKind, SceneGraph, WireframeImage,
};

/// Maximum distance for snapping a vehicle to a lane centerline, meters.
const SNAP_RADIUS: f64 = 3.0;
/// Maximum endpoint gap bridged when chaining successor lanes, meters.
const CHAIN_GAP: f64 = 0.5;
/// Outpainting stride: half the window, meters.
pub const OUTPAINT_STRIDE: f64 = 32.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutProvenance {
    pub source: String,
    pub seed: u64,
}

/// Frames at t = 0..=T_roll; frame 0 is the input scene and agent identity
/// is positional (agents[i] is the same actor in every frame).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutSequence {
    pub frames: Vec<SceneGraph>,
    pub dt: f64,
    pub provenance: RolloutProvenance,
}

impl RolloutSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Follower path: an explicit polyline starting exactly at the agent's
/// position, continuing along the laterally offset lane centerline and its
/// chained successors. Advancing by arc length guarantees per-frame chord
/// displacement never exceeds the arc step.
struct FollowPath {
    points: Vec<[f64; 3]>,
}

impl FollowPath {
    fn as_polyline(&self) -> LanePolyline {
        LanePolyline {
            lane_id: 0,
            points: self.points.clone(),
        }
    }
}

fn project_to_polyline(points: &[[f64; 3]], x: f64, y: f64) -> (f64, f64, f64) {
    // Returns (distance, arc position, signed lateral offset).
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let mut acc = 0.0;
    for w in points.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        if len2 < 1e-18 {
            continue;
        }
        let t = (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (ax + t * dx, ay + t * dy);
        let dist = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        if dist < best.0 {
            let seg_len = len2.sqrt();
            // Sign of the lateral offset: left of travel direction positive.
            let side = (dx * (y - ay) - dy * (x - ax)) / seg_len;
            best = (dist, acc + t * seg_len, side);
        }
        acc += len2.sqrt();
    }
    best
}

fn build_follow_path(scene: &SceneGraph, agent_idx: usize) -> Option<FollowPath> {
    let a = &scene.agents[agent_idx];
    let mut best: Option<(f64, usize, f64)> = None;
    for (li, lane) in scene.lanes.iter().enumerate() {
        let (dist, _, lat) = project_to_polyline(&lane.points, a.x, a.y);
        if dist <= SNAP_RADIUS && best.map(|(d, ..)| dist < d).unwrap_or(true) {
            best = Some((dist, li, lat));
        }
    }
    let (_, lane_idx, lateral) = best?;

    // Chain successors (lowest id first) while the geometry stays connected.
    let mut centerline = scene.lanes[lane_idx].points.clone();
    let mut current = scene.lanes[lane_idx].lane_id;
    let mut visited = std::collections::HashSet::from([current]);
    for _ in 0..8 {
        let succ = scene
            .connectivity
            .successors(current)
            .filter(|id| !visited.contains(id))
            .min();
        let Some(succ_id) = succ else { break };
        let Some(succ_lane) = scene.lanes.iter().find(|l| l.lane_id == succ_id) else {
            break;
        };
        let end = *centerline.last().unwrap();
        let (gap, s_on_succ, _) = project_to_polyline(&succ_lane.points, end[0], end[1]);
        if gap > CHAIN_GAP {
            break;
        }
        // Append the successor from the projection point forward.
        centerline.extend(resample_from(succ_lane, s_on_succ));
        visited.insert(succ_id);
        current = succ_id;
    }

    // Shift the centerline sideways by the agent's lateral offset so the
    // path runs through the agent, then make it start exactly there.
    let offset: Vec<[f64; 3]> = (0..centerline.len())
        .map(|i| {
            let (tx, ty) = vertex_tangent(&centerline, i);
            [
                centerline[i][0] - ty * lateral,
                centerline[i][1] + tx * lateral,
                centerline[i][2],
            ]
        })
        .collect();
    let mut best_seg = (f64::INFINITY, 0usize);
    for (j, w) in offset.windows(2).enumerate() {
        let (dist, _, _) = project_to_polyline(w, a.x, a.y);
        if dist < best_seg.0 {
            best_seg = (dist, j);
        }
    }
    let mut points = vec![[a.x, a.y, a.z]];
    points.extend_from_slice(&offset[best_seg.1 + 1..]);
    if points.len() < 2 {
        return None;
    }
    Some(FollowPath { points })
}

fn vertex_tangent(points: &[[f64; 3]], i: usize) -> (f64, f64) {
    let (p, q) = if i == 0 {
        (points[0], points[1])
    } else if i + 1 == points.len() {
        (points[i - 1], points[i])
    } else {
        (points[i - 1], points[i + 1])
    };
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let len = (dx * dx + dy * dy).sqrt().max(1e-12);
    (dx / len, dy / len)
}

fn resample_from(lane: &LanePolyline, s_from: f64) -> Vec<[f64; 3]> {
    let total = lane.arc_length();
    let mut out = Vec::new();
    let n = 24;
    for k in 0..=n {
        let s = s_from + (total - s_from) * k as f64 / n as f64;
        out.push(lane.point_at(s));
    }
    out
}

/// Roll the scene forward: lane-snapped vehicles follow their lane's arc
/// length at constant speed (successors by lowest id), unsnapped vehicles go
/// straight, pedestrians and statics hold position.
pub fn rollout_behavior(scene: &SceneGraph, t_roll: usize, dt: f64) -> Result<RolloutSequence> {
    if dt <= 0.0 {
        return Err(Error::Contract(format!("dt must be positive, got {dt}")));
    }
    scene.validate()?;

    enum Plan {
        Hold,
        Straight,
        Follow(FollowPath),
    }
    let plans: Vec<Plan> = (0..scene.agents.len())
        .map(|i| match scene.agents[i].class {
            AgentClass::Pedestrian | AgentClass::Static => Plan::Hold,
            AgentClass::Vehicle => match build_follow_path(scene, i) {
                Some(p) => Plan::Follow(p),
                None => Plan::Straight,
            },
        })
        .collect();

    let mut frames = Vec::with_capacity(t_roll + 1);
    frames.push(scene.clone());
    for step in 1..=t_roll {
        let t = step as f64 * dt;
        let mut frame = scene.clone();
        for (i, plan) in plans.iter().enumerate() {
            let a0 = scene.agents[i];
            let agent = &mut frame.agents[i];
            match plan {
                Plan::Hold => {}
                Plan::Straight => {
                    let (s, c) = a0.heading.sin_cos();
                    agent.x = a0.x + c * a0.speed * t;
                    agent.y = a0.y + s * a0.speed * t;
                }
                Plan::Follow(path) => {
                    let poly = path.as_polyline();
                    let total = poly.arc_length();
                    let s = a0.speed * t;
                    if s <= total {
                        let p = poly.point_at(s);
                        let (tx, ty) = poly.tangent_at(s);
                        agent.x = p[0];
                        agent.y = p[1];
                        agent.z = p[2];
                        agent.heading = normalize_heading(ty.atan2(tx));
                    } else {
                        // Past the final endpoint: continue straight.
                        let p = poly.point_at(total);
                        let (tx, ty) = poly.tangent_at(total - 1e-9);
                        let extra = s - total;
                        agent.x = p[0] + tx * extra;
                        agent.y = p[1] + ty * extra;
                        agent.heading = normalize_heading(ty.atan2(tx));
                    }
                }
            }
        }
        frames.push(frame);
    }
    Ok(RolloutSequence {
        frames,
        dt,
        provenance: RolloutProvenance {
            source: "rollout".into(),
            seed: 0,
        },
    })
}

/// Extend an ego-frame scene forward by `distance` meters (a multiple of the
/// 32 m stride) using masked denoising over shifted windows with the
/// overlapping half clamped.
pub fn extend_scene<T: Real>(
    scene: &SceneGraph,
    bundle: &ModelBundle<T>,
    distance: f64,
    guidance: f64,
    seed: u64,
) -> Result<SceneGraph> {
    if distance < 0.0 || (distance / OUTPAINT_STRIDE).fract().abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "distance {distance} must be a non-negative multiple of {OUTPAINT_STRIDE}"
        )));
    }
    let mut out = scene.clone();
    let steps = (distance / OUTPAINT_STRIDE).round() as usize;
    let mut next_lane_id = out.lanes.iter().map(|l| l.lane_id + 1).max().unwrap_or(0);

    for k in 1..=steps {
        let shift = k as f64 * OUTPAINT_STRIDE;
        // Window in the original frame: [shift - 4, shift + 60] x [-32, 32],
        // i.e. the forward-only layout around a virtual ego at x = shift.
        let local = |x: f64| x - shift;

        // Observed content: the rear half of the window, from the existing
        // scene.
        let window_lo = shift - 4.0;
        let observed_hi = shift + 28.0;
        let mut obs_lanes: Vec<LanePolyline> = Vec::new();
        for lane in &out.lanes {
            let inside: Vec<[f64; 3]> = lane
                .points
                .iter()
                .filter(|p| p[0] >= window_lo && p[0] <= observed_hi && p[1].abs() <= 32.0)
                .map(|p| [local(p[0]), p[1], p[2]])
                .collect();
            if inside.len() >= 2 {
                obs_lanes.push(LanePolyline::resampled(&inside, obs_lanes.len() as u32));
            }
        }
        let obs_agents: Vec<_> = out
            .agents
            .iter()
            .filter(|a| a.x >= window_lo && a.x <= observed_hi && a.y.abs() <= 32.0)
            .map(|a| {
                let mut b = *a;
                b.x = local(a.x);
                b
            })
            .collect();

        let n_obs_l = obs_lanes.len();
        let n_obs_o = obs_agents.len();
        let n_l = (n_obs_l + n_obs_l.max(1)).min(bundle.dn_cfg.max_lanes);
        let n_o = (n_obs_o + 2).min(bundle.dn_cfg.max_agents).max(1);

        let mut attempt = 0usize;
        let new_scene = loop {
            let partial = SceneGraph {
                agents: obs_agents.clone(),
                lanes: obs_lanes.clone(),
                connectivity: Default::default(),
                layout: LayoutKind::ForwardOnly,
                bounds: crate::scene::layout_bounds(LayoutKind::ForwardOnly),
                ..out.clone()
            };
            let observed = pad_latents(bundle, &partial, n_o, n_l)?;
            let mut mask = TokenMask::none(n_o, n_l);
            for i in 0..n_obs_o {
                mask.agents[i] = true;
            }
            for i in 0..n_obs_l {
                mask.lanes[i] = true;
            }
            let spec = ConditionSpec {
                dense: None,
                n_o,
                n_l,
                domain: out.domain,
            };
            let decoded = masked_denoise(
                bundle,
                &observed,
                &mask,
                &spec,
                LayoutKind::ForwardOnly,
                guidance,
                seed.wrapping_add(k as u64 * 1000 + attempt as u64),
            )?;
            // New content must land in the forward half of the window.
            let has_new = decoded
                .lanes
                .iter()
                .skip(n_obs_l)
                .any(|l| l.points.iter().any(|p| p[0] > 28.0));
            if has_new || attempt >= 4 {
                if !has_new {
                    return Err(Error::Degenerate(format!(
                        "outpainting produced no forward content after {} attempts",
                        attempt + 1
                    )));
                }
                break decoded;
            }
            attempt += 1;
        };

        // Stitch: append new-half geometry translated back to the original
        // frame; the observed half is already present and untouched.
        for lane in new_scene.lanes.iter().skip(n_obs_l) {
            let pts: Vec<[f64; 3]> = lane
                .points
                .iter()
                .map(|p| [p[0] + shift, p[1], p[2]])
                .collect();
            if pts.iter().any(|p| p[0] > shift + 28.0) {
                out.lanes.push(LanePolyline::resampled(&pts, next_lane_id));
                next_lane_id += 1;
            }
        }
        for agent in new_scene.agents.iter().skip(n_obs_o) {
            let mut a = *agent;
            a.x += shift;
            if a.x > shift + 28.0 {
                out.agents.push(a);
            }
        }
        out.bounds = Bounds {
            max_x: out.bounds.max_x + OUTPAINT_STRIDE,
            ..out.bounds
        };
    }
    Ok(out)
}

fn pad_latents<T: Real>(
    bundle: &ModelBundle<T>,
    partial: &SceneGraph,
    n_o: usize,
    n_l: usize,
) -> Result<crate::ae::LatentSet<T>> {
    let enc = encode_scene(&bundle.store, partial, &bundle.ae_cfg)?;
    let scaled = bundle.scaler.scale(&enc);
    let mut z_o = ndarray::Array2::<T>::zeros((n_o, bundle.ae_cfg.d));
    let mut z_l = ndarray::Array2::<T>::zeros((n_l, bundle.ae_cfg.d));
    for i in 0..scaled.z_o.nrows().min(n_o) {
        z_o.row_mut(i).assign(&scaled.z_o.row(i));
    }
    for i in 0..scaled.z_l.nrows().min(n_l) {
        z_l.row_mut(i).assign(&scaled.z_l.row(i));
    }
    Ok(crate::ae::LatentSet { z_o, z_l })
}

/// Re-render the rollout from a camera rigidly attached to one actor.
pub fn wireframe_sequence(
    rollout: &RolloutSequence,
    cam: &CameraModel,
    actor_index: usize,
) -> Result<Vec<WireframeImage>> {
    let mut out = Vec::with_capacity(rollout.frames.len());
    for (fi, frame) in rollout.frames.iter().enumerate() {
        let actor = frame.agents.get(actor_index).ok_or_else(|| {
            Error::Contract(format!("actor {actor_index} missing in frame {fi}"))
        })?;
        let mut attached = *cam;
        attached.position = [actor.x, actor.y, cam.position[2] + actor.z];
        attached.yaw = actor.heading;
        out.push(bev_to_camera_wireframe(frame, &attached));
    }
    Ok(out)
}

/// Wireframe SVG in image coordinates; visible segments solid, culled ones
/// dashed.
pub fn wireframe_to_svg(wf: &WireframeImage, cam: &CameraModel, header: Option<&str>) -> String {
    let w = cam.image_size[0];
    let h = cam.image_size[1];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    if let Some(c) = header {
        s.push_str(&format!("<!-- {} -->\n", c.replace("--", "-")));
    }
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"#111\"/>\n"));
    for seg in &wf.segments {
        let style = if seg.visible {
            "stroke=\"#7fd4ff\" stroke-width=\"1.2\""
        } else {
            "stroke=\"#444\" stroke-width=\"0.8\" stroke-dasharray=\"3,3\""
        };
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" {style}/>\n",
            seg.a[0], seg.a[1], seg.b[0], seg.b[1]
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Binary segment-list export. Per frame: header (frame index u32, segment
/// count u32), then per segment four f32 pixel coordinates and a visibility
/// byte, all little-endian.
pub fn wireframes_to_bytes(frames: &[WireframeImage]) -> Vec<u8> {
    let mut buf = Vec::new();
    for (i, wf) in frames.iter().enumerate() {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&(wf.segments.len() as u32).to_le_bytes());
        for seg in &wf.segments {
            for v in [seg.a[0], seg.a[1], seg.b[0], seg.b[1]] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            buf.push(seg.visible as u8);
        }
    }
    buf
}
