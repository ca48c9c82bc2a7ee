//! Procedural scene templates: straight roads, curved roads, T-junctions and
//! four-way intersections, with rejection-sampled agent placement.
//!
//! Scenes are generated directly in the ego frame (ego at the origin heading
//! +x on a lane) over the union of both canonical crop windows, so either
//! crop can be taken later without losing content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusParams;
use crate::error::Result;
use crate::scene::{
    normalize_heading, oriented_box_iou, AgentBox, AgentClass, Bounds, ConnectivityGraph,
    LanePolyline, LayoutKind, SceneGraph, SCENE_SCHEMA_VERSION,
};

pub const LANE_WIDTH: f64 = 3.5;

/// Generation region: union of the ego-centered and forward-only windows.
const GEN_MIN_X: f64 = -36.0;
const GEN_MAX_X: f64 = 64.0;
const GEN_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Straight,
    Curved,
    TJunction,
    FourWay,
}

impl TemplateKind {
    pub fn index(self) -> usize {
        match self {
            TemplateKind::Straight => 0,
            TemplateKind::Curved => 1,
            TemplateKind::TJunction => 2,
            TemplateKind::FourWay => 3,
        }
    }
}

struct RoadPlan {
    lanes: Vec<LanePolyline>,
    edges: Vec<(u32, u32)>,
    template: TemplateKind,
}

/// Deterministically generate one ground-truth scene.
///
/// Agents sit on lane centerlines with lane-aligned headings; placement is
/// rejection-sampled so no two footprints overlap. Exhausting the rejection
/// budget yields fewer agents, never an overlapping pair.
pub fn generate_scene(seed: u64, params: &CorpusParams) -> Result<SceneGraph> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(params.seed, seed));

    let template = params.templates[rng.gen_range(0..params.templates.len())];
    let domain = params.domains[rng.gen_range(0..params.domains.len())];
    let plan = match template {
        TemplateKind::Straight => plan_straight(&mut rng),
        TemplateKind::Curved => plan_curved(&mut rng),
        TemplateKind::TJunction => plan_t_junction(&mut rng),
        TemplateKind::FourWay => plan_four_way(&mut rng),
    };

    let ego = AgentBox {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        heading: 0.0,
        length: 4.6,
        width: 1.9,
        height: 1.55,
        speed: rng.gen_range(2.0..12.0),
        class: AgentClass::Vehicle,
    };
    let mut agents = vec![ego];

    let n_target = rng.gen_range(params.agent_count_min..=params.agent_count_max);
    let mut pedestrians = 0usize;
    for _ in 0..n_target {
        let roll: f64 = rng.gen();
        let class = if roll < params.pedestrian_probability && pedestrians < params.max_pedestrians
        {
            AgentClass::Pedestrian
        } else if roll < params.pedestrian_probability + params.static_probability {
            AgentClass::Static
        } else {
            AgentClass::Vehicle
        };
        if let Some(a) = place_agent(&mut rng, &plan.lanes, &agents, class) {
            if a.class == AgentClass::Pedestrian {
                pedestrians += 1;
            }
            agents.push(a);
        }
    }

    let scene = SceneGraph {
        schema: SCENE_SCHEMA_VERSION,
        agents,
        connectivity: ConnectivityGraph { edges: plan.edges },
        lanes: plan.lanes,
        layout: LayoutKind::EgoCentered,
        domain,
        bounds: generation_bounds(),
        original_pose: None,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn generation_bounds() -> Bounds {
    Bounds {
        min_x: GEN_MIN_X,
        max_x: GEN_MAX_X,
        min_y: -36.0,
        max_y: 36.0,
    }
}

fn mix(seed: u64, id: u64) -> u64 {
    // splitmix-style avalanche over (seed, id)
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---- lane templates ----

fn straight_lane(lane_id: u32, y: f64) -> LanePolyline {
    let pts: Vec<[f64; 3]> = (0..=20)
        .map(|i| [GEN_MIN_X + (GEN_MAX_X - GEN_MIN_X) * i as f64 / 20.0, y, 0.0])
        .collect();
    LanePolyline::resampled(&pts, lane_id)
}

/// Parallel eastbound lanes; the ego lane has offset zero.
fn plan_straight(rng: &mut ChaCha8Rng) -> RoadPlan {
    let n = rng.gen_range(1..=6usize);
    let ego_lane = rng.gen_range(0..n);
    let lanes = (0..n)
        .map(|i| straight_lane(i as u32, (i as f64 - ego_lane as f64) * LANE_WIDTH))
        .collect();
    RoadPlan {
        lanes,
        edges: vec![],
        template: TemplateKind::Straight,
    }
}

/// Concentric arcs around a common center; the ego arc passes the origin with
/// heading +x.
fn plan_curved(rng: &mut ChaCha8Rng) -> RoadPlan {
    let n = rng.gen_range(1..=4usize);
    let ego_lane = rng.gen_range(0..n);
    let dir: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let r_ego = rng.gen_range(45.0..110.0);
    let center = [0.0, dir * r_ego];
    let mut lanes = Vec::with_capacity(n);
    for i in 0..n {
        // Lanes left of ego (offset +y near the origin) are closer to a
        // left-turn center and farther from a right-turn center.
        let offset = (i as f64 - ego_lane as f64) * LANE_WIDTH;
        let r_i = r_ego - dir * offset;
        let pts: Vec<[f64; 3]> = (0..=24)
            .map(|k| {
                let s = -42.0 + (42.0 + 70.0) * k as f64 / 24.0;
                let theta = -dir * std::f64::consts::FRAC_PI_2 + dir * s / r_ego;
                [
                    center[0] + r_i * theta.cos(),
                    center[1] + r_i * theta.sin(),
                    0.0,
                ]
            })
            .collect();
        lanes.push(LanePolyline::resampled(&pts, i as u32));
    }
    RoadPlan {
        lanes,
        edges: vec![],
        template: TemplateKind::Curved,
    }
}

/// Quarter-circle connector turning a northbound approach onto an eastbound
/// lane. Starts at (x0, y0) heading +y, ends heading +x at y0 + r.
fn turn_arc(lane_id: u32, x0: f64, y0: f64, r: f64) -> LanePolyline {
    let pts: Vec<[f64; 3]> = (0..=16)
        .map(|k| {
            let theta = std::f64::consts::PI
                - std::f64::consts::FRAC_PI_2 * k as f64 / 16.0;
            [x0 + r + r * theta.cos(), y0 + r * theta.sin(), 0.0]
        })
        .collect();
    LanePolyline::resampled(&pts, lane_id)
}

fn plan_t_junction(rng: &mut ChaCha8Rng) -> RoadPlan {
    let n_main = rng.gen_range(1..=3usize);
    let ego_lane = rng.gen_range(0..n_main);
    let x_j = rng.gen_range(14.0..26.0);

    let mut lanes: Vec<LanePolyline> = Vec::new();
    let mut edges = Vec::new();
    let main_offsets: Vec<f64> = (0..n_main)
        .map(|i| (i as f64 - ego_lane as f64) * LANE_WIDTH)
        .collect();
    for (i, &y) in main_offsets.iter().enumerate() {
        lanes.push(straight_lane(i as u32, y));
    }
    let min_main = main_offsets.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_stop = min_main - 4.0;

    let n_side = rng.gen_range(1..=2usize);
    let mut next_id = n_main as u32;
    for k in 0..n_side {
        let x_k = x_j + k as f64 * LANE_WIDTH;
        let approach_id = next_id;
        next_id += 1;
        let pts: Vec<[f64; 3]> = (0..=16)
            .map(|i| [x_k, -36.0 + (y_stop + 36.0) * i as f64 / 16.0, 0.0])
            .collect();
        lanes.push(LanePolyline::resampled(&pts, approach_id));

        let target_main = (k % n_main) as u32;
        let y_target = main_offsets[target_main as usize];
        let conn_id = next_id;
        next_id += 1;
        lanes.push(turn_arc(conn_id, x_k, y_stop, y_target - y_stop));
        edges.push((approach_id, conn_id));
        edges.push((conn_id, target_main));
    }
    RoadPlan {
        lanes,
        edges,
        template: TemplateKind::TJunction,
    }
}

fn plan_four_way(rng: &mut ChaCha8Rng) -> RoadPlan {
    let n_ew = rng.gen_range(1..=3usize);
    let ego_lane = rng.gen_range(0..n_ew);
    let x_j = rng.gen_range(14.0..26.0);

    let mut lanes: Vec<LanePolyline> = Vec::new();
    let mut edges = Vec::new();
    let ew_offsets: Vec<f64> = (0..n_ew)
        .map(|i| (i as f64 - ego_lane as f64) * LANE_WIDTH)
        .collect();
    for (i, &y) in ew_offsets.iter().enumerate() {
        lanes.push(straight_lane(i as u32, y));
    }
    let min_ew = ew_offsets.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_ew = ew_offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_stop = min_ew - 4.0;
    let y_resume = max_ew + 4.0;

    let n_ns = rng.gen_range(1..=2usize);
    let mut next_id = n_ew as u32;
    for k in 0..n_ns {
        let x_k = x_j + k as f64 * LANE_WIDTH;
        let approach_id = next_id;
        let through_id = next_id + 1;
        let exit_id = next_id + 2;
        let turn_id = next_id + 3;
        next_id += 4;

        let approach: Vec<[f64; 3]> = (0..=16)
            .map(|i| [x_k, -36.0 + (y_stop + 36.0) * i as f64 / 16.0, 0.0])
            .collect();
        lanes.push(LanePolyline::resampled(&approach, approach_id));
        let through: Vec<[f64; 3]> = (0..=8)
            .map(|i| [x_k, y_stop + (y_resume - y_stop) * i as f64 / 8.0, 0.0])
            .collect();
        lanes.push(LanePolyline::resampled(&through, through_id));
        let exit: Vec<[f64; 3]> = (0..=16)
            .map(|i| [x_k, y_resume + (36.0 - y_resume) * i as f64 / 16.0, 0.0])
            .collect();
        lanes.push(LanePolyline::resampled(&exit, exit_id));

        let target_main = (k % n_ew) as u32;
        let y_target = ew_offsets[target_main as usize];
        lanes.push(turn_arc(turn_id, x_k, y_stop, y_target - y_stop));

        edges.push((approach_id, through_id));
        edges.push((through_id, exit_id));
        edges.push((approach_id, turn_id));
        edges.push((turn_id, target_main));
    }
    RoadPlan {
        lanes,
        edges,
        template: TemplateKind::FourWay,
    }
}

// ---- agent placement ----

fn place_agent(
    rng: &mut ChaCha8Rng,
    lanes: &[LanePolyline],
    placed: &[AgentBox],
    class: AgentClass,
) -> Option<AgentBox> {
    const BUDGET: usize = 40;
    for _ in 0..BUDGET {
        let lane = &lanes[rng.gen_range(0..lanes.len())];
        let total = lane.arc_length();
        if total < 6.0 {
            continue;
        }
        let s = rng.gen_range(2.0..total - 2.0);
        let p = lane.point_at(s);
        let (tx, ty) = lane.tangent_at(s);
        let lane_heading = ty.atan2(tx);

        let candidate = match class {
            AgentClass::Vehicle => AgentBox {
                x: p[0] + rng.gen_range(-0.3..0.3),
                y: p[1] + rng.gen_range(-0.3..0.3),
                z: p[2],
                heading: normalize_heading(lane_heading + rng.gen_range(-0.05..0.05)),
                length: rng.gen_range(3.9..5.4),
                width: rng.gen_range(1.8..2.1),
                height: rng.gen_range(1.4..1.8),
                speed: rng.gen_range(0.0..13.0),
                class,
            },
            AgentClass::Pedestrian => {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let off = side * rng.gen_range(2.5..5.0);
                AgentBox {
                    x: p[0] - ty * off,
                    y: p[1] + tx * off,
                    z: p[2],
                    heading: normalize_heading(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
                    length: 0.6,
                    width: 0.6,
                    height: 1.75,
                    speed: rng.gen_range(0.0..1.8),
                    class,
                }
            }
            AgentClass::Static => {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let off = side * rng.gen_range(2.8..6.0);
                AgentBox {
                    x: p[0] - ty * off,
                    y: p[1] + tx * off,
                    z: p[2],
                    heading: normalize_heading(lane_heading),
                    length: rng.gen_range(1.0..4.8),
                    width: rng.gen_range(0.8..2.0),
                    height: rng.gen_range(0.8..1.6),
                    speed: 0.0,
                    class,
                }
            }
        };

        let b = generation_bounds();
        if candidate.x < b.min_x + GEN_MARGIN
            || candidate.x > b.max_x - GEN_MARGIN
            || candidate.y < b.min_y + GEN_MARGIN
            || candidate.y > b.max_y - GEN_MARGIN
        {
            continue;
        }
        if placed
            .iter()
            .all(|other| oriented_box_iou(&candidate, other) == 0.0)
        {
            return Some(candidate);
        }
    }
    None
}

/// Rule-based template classifier for generated scenes (used by the global
/// scene descriptor, where generated scenes carry no template label).
pub fn infer_template(scene: &SceneGraph) -> TemplateKind {
    let mut curved = 0usize;
    let mut horizontal = 0usize;
    let mut vertical_south = false;
    let mut vertical_north = false;
    for lane in &scene.lanes {
        let n = lane.points.len();
        let a = lane.points[0];
        let b = lane.points[n - 1];
        let (sx, sy) = (b[0] - a[0], b[1] - a[1]);
        let chord = (sx * sx + sy * sy).sqrt();
        if chord < 1e-6 {
            continue;
        }
        let straightness = chord / lane.arc_length().max(1e-9);
        let angle = sy.atan2(sx).abs();
        if straightness < 0.995 {
            curved += 1;
        } else if angle > std::f64::consts::FRAC_PI_4 && angle < 3.0 * std::f64::consts::FRAC_PI_4
        {
            // Crossing-road segment: which side of the main road does it sit
            // on? Through segments straddle both and set neither flag.
            if lane.points.iter().all(|p| p[1] < -2.0) {
                vertical_south = true;
            } else if lane.points.iter().all(|p| p[1] > 2.0) {
                vertical_north = true;
            }
        } else {
            horizontal += 1;
        }
    }
    if vertical_south || vertical_north {
        if vertical_south && vertical_north {
            TemplateKind::FourWay
        } else {
            TemplateKind::TJunction
        }
    } else if curved > horizontal {
        TemplateKind::Curved
    } else {
        TemplateKind::Straight
    }
}
