//! Deterministic pseudo-image encoder: projects scene geometry through the
//! forward camera and fills a fixed token grid with local occupancy/semantic
//! descriptors plus nearest-surface depth. Stands in for frozen pretrained
//! vision and depth backbones.

use ndarray::Array2;

use super::DenseImageTokens;
use crate::scene::{CameraModel, SceneGraph};

pub const GRID_W: usize = 16;
pub const GRID_H: usize = 9;
pub const M_I: usize = GRID_W * GRID_H;
pub const D_FEAT: usize = 16;
pub const D_DEPTH: usize = 1;
/// Background / maximum depth, meters.
pub const DEPTH_MAX: f64 = 64.0;

/// Index of the background flag inside the feature descriptor.
pub const FEAT_BACKGROUND: usize = 15;

#[derive(Clone, Copy)]
struct CellHit {
    depth: f64,
    feat: [f32; D_FEAT],
}

/// Render the dense token grid for a scene seen from `cam`.
///
/// Each cell carries the descriptor of the nearest element covering its
/// center (min-depth rule); empty cells carry the background code and
/// `DEPTH_MAX` depth.
pub fn render_pseudo_image(scene: &SceneGraph, cam: &CameraModel) -> DenseImageTokens {
    let cell_w = cam.image_size[0] as f64 / GRID_W as f64;
    let cell_h = cam.image_size[1] as f64 / GRID_H as f64;
    let mut cells: Vec<Option<CellHit>> = vec![None; M_I];

    let mut consider = |col: i64, row: i64, hit: CellHit| {
        if col < 0 || row < 0 || col >= GRID_W as i64 || row >= GRID_H as i64 {
            return;
        }
        let idx = row as usize * GRID_W + col as usize;
        match &cells[idx] {
            Some(prev) if prev.depth <= hit.depth => {}
            _ => cells[idx] = Some(hit),
        }
    };

    for agent in &scene.agents {
        // Billboard projection at the center depth: apparent extent and cell
        // coverage are functions of (center pixel, center depth) alone, so a
        // pure lateral shift translates the token footprint rigidly.
        let mid_z = agent.z + agent.height / 2.0;
        let cf = cam.to_camera_frame([agent.x, agent.y, mid_z]);
        if cf[2] < crate::scene::NEAR_PLANE {
            continue;
        }
        let center_u = cam.principal[0] + cam.focal * cf[0] / cf[2];
        let center_v = cam.principal[1] + cam.focal * cf[1] / cf[2];
        let half_w_px = cam.focal * agent.length.max(agent.width) / 2.0 / cf[2];
        let half_h_px = cam.focal * agent.height / 2.0 / cf[2];
        let (min_u, max_u) = (center_u - half_w_px, center_u + half_w_px);
        let (min_v, max_v) = (center_v - half_h_px, center_v + half_h_px);
        if max_u < 0.0
            || min_u > cam.image_size[0] as f64
            || max_v < 0.0
            || min_v > cam.image_size[1] as f64
        {
            continue;
        }
        // Nearest-surface proxy: pull the center depth forward by the
        // footprint half-extent.
        let depth = (cf[2] - agent.length.max(agent.width) / 2.0)
            .max(crate::scene::NEAR_PLANE)
            .clamp(0.0, DEPTH_MAX);

        let mut feat = [0.0f32; D_FEAT];
        feat[agent.class.index()] = 1.0; // 0..3 class one-hot
        feat[4] = ((max_u - min_u) / cam.image_size[0] as f64).min(1.0) as f32;
        feat[5] = ((max_v - min_v) / cam.image_size[1] as f64).min(1.0) as f32;
        feat[8] = (1.0 / (1.0 + depth)) as f32;
        feat[9] = (agent.length / 10.0) as f32;
        feat[10] = (agent.width / 5.0) as f32;
        feat[11] = (agent.height / 3.0) as f32;
        feat[12] = (agent.speed / 15.0) as f32;
        feat[13] = agent.heading.sin() as f32;
        feat[14] = agent.heading.cos() as f32;

        let col_lo = (min_u / cell_w).floor() as i64;
        let col_hi = (max_u / cell_w).floor() as i64;
        let row_lo = (min_v / cell_h).floor() as i64;
        let row_hi = (max_v / cell_h).floor() as i64;
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                // Cell-center containment keeps coverage aligned to columns.
                let cu = (col as f64 + 0.5) * cell_w;
                let cv = (row as f64 + 0.5) * cell_h;
                if cu < min_u || cu > max_u || cv < min_v || cv > max_v {
                    continue;
                }
                let mut f = feat;
                f[6] = ((center_u - cu) / cell_w).clamp(-1.0, 1.0) as f32;
                f[7] = ((center_v - cv) / cell_h).clamp(-1.0, 1.0) as f32;
                consider(col, row, CellHit { depth, feat: f });
            }
        }
    }

    for lane in &scene.lanes {
        for w in lane.points.windows(2) {
            let cp = cam.to_camera_frame(w[0]);
            let cq = cam.to_camera_frame(w[1]);
            let near = crate::scene::NEAR_PLANE;
            if cp[2] < near && cq[2] < near {
                continue;
            }
            // Sample densely along the segment in 3D, projecting each sample.
            let steps = 24;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let p = [
                    cp[0] + t * (cq[0] - cp[0]),
                    cp[1] + t * (cq[1] - cp[1]),
                    cp[2] + t * (cq[2] - cp[2]),
                ];
                if p[2] < near {
                    continue;
                }
                let u = cam.principal[0] + cam.focal * p[0] / p[2];
                let v = cam.principal[1] + cam.focal * p[1] / p[2];
                if u < 0.0 || v < 0.0 || u >= cam.image_size[0] as f64 || v >= cam.image_size[1] as f64
                {
                    continue;
                }
                let depth = p[2].clamp(0.0, DEPTH_MAX);
                let mut feat = [0.0f32; D_FEAT];
                feat[3] = 1.0; // lane flag
                feat[8] = (1.0 / (1.0 + depth)) as f32;
                consider(
                    (u / cell_w).floor() as i64,
                    (v / cell_h).floor() as i64,
                    CellHit { depth, feat },
                );
            }
        }
    }

    let mut feat = Array2::<f32>::zeros((M_I, D_FEAT));
    let mut depth = Array2::<f32>::zeros((M_I, D_DEPTH));
    for (i, cell) in cells.iter().enumerate() {
        match cell {
            Some(hit) => {
                for (j, &x) in hit.feat.iter().enumerate() {
                    feat[[i, j]] = x;
                }
                depth[[i, 0]] = hit.depth as f32;
            }
            None => {
                feat[[i, FEAT_BACKGROUND]] = 1.0;
                depth[[i, 0]] = DEPTH_MAX as f32;
            }
        }
    }
    DenseImageTokens { feat, depth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        AgentBox, AgentClass, Bounds, ConnectivityGraph, DomainTag, LanePolyline, LayoutKind,
        SCENE_SCHEMA_VERSION,
    };

    fn scene_with_agents(agents: Vec<AgentBox>, lanes: Vec<LanePolyline>) -> SceneGraph {
        SceneGraph {
            schema: SCENE_SCHEMA_VERSION,
            agents,
            lanes,
            connectivity: ConnectivityGraph::default(),
            layout: LayoutKind::ForwardOnly,
            domain: DomainTag::Metro,
            bounds: Bounds {
                min_x: -4.0,
                max_x: 60.0,
                min_y: -32.0,
                max_y: 32.0,
            },
            original_pose: None,
        }
    }

    fn vehicle(x: f64, y: f64) -> AgentBox {
        AgentBox {
            x,
            y,
            z: 0.0,
            heading: 0.0,
            length: 4.5,
            width: 2.0,
            height: 1.6,
            speed: 5.0,
            class: AgentClass::Vehicle,
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let s = scene_with_agents(vec![], vec![]);
        let t = render_pseudo_image(&s, &CameraModel::default_forward());
        for i in 0..M_I {
            assert_eq!(t.feat[[i, FEAT_BACKGROUND]], 1.0);
            assert_eq!(t.depth[[i, 0]], DEPTH_MAX as f32);
        }
        // Geometry entirely behind the camera is equivalent to empty.
        let lane = LanePolyline::resampled(
            &(0..20)
                .map(|i| [-1000.0 - i as f64, 0.0, 0.0])
                .collect::<Vec<_>>(),
            0,
        );
        let s2 = scene_with_agents(vec![], vec![lane]);
        let t2 = render_pseudo_image(&s2, &CameraModel::default_forward());
        assert_eq!(t, t2);
    }

    #[test]
    fn occlusion_keeps_nearer_depth() {
        let near = vehicle(10.0, 0.0);
        let far = vehicle(30.0, 0.0);
        let s = scene_with_agents(vec![near, far], vec![]);
        let t = render_pseudo_image(&s, &CameraModel::default_forward());
        // The image center column looks straight down the x-axis; the nearest
        // covered cell must carry the near agent's depth.
        let mut min_depth = f32::INFINITY;
        for i in 0..M_I {
            if t.feat[[i, FEAT_BACKGROUND]] == 0.0 {
                min_depth = min_depth.min(t.depth[[i, 0]]);
            }
        }
        assert!(min_depth < 12.0 && min_depth > 6.0, "min depth {min_depth}");
    }

    #[test]
    fn agent_outside_frustum_contributes_nothing() {
        let behind = vehicle(-20.0, 0.0);
        let s = scene_with_agents(vec![behind], vec![]);
        let t = render_pseudo_image(&s, &CameraModel::default_forward());
        for i in 0..M_I {
            assert_eq!(t.feat[[i, FEAT_BACKGROUND]], 1.0);
        }
    }

    #[test]
    fn lateral_shift_by_one_cell_moves_one_column() {
        let cam = CameraModel::default_forward();
        let depth = 20.0;
        // One cell width in image space at this depth, in meters:
        // du = f * dy / z  =>  dy = cell_px * z / f.
        let cell_px = cam.image_size[0] as f64 / GRID_W as f64;
        let dy = cell_px * depth / cam.focal;

        let a = scene_with_agents(vec![vehicle(depth, 0.0)], vec![]);
        // +y in the ego frame is left, which maps to smaller u.
        let b = scene_with_agents(vec![vehicle(depth, dy)], vec![]);
        let ta = render_pseudo_image(&a, &cam);
        let tb = render_pseudo_image(&b, &cam);

        for row in 0..GRID_H {
            for col in 1..GRID_W {
                let ia = row * GRID_W + col;
                let ib = row * GRID_W + col - 1;
                for j in 0..D_FEAT {
                    assert!(
                        (ta.feat[[ia, j]] - tb.feat[[ib, j]]).abs() < 1e-6,
                        "feat mismatch at row {row} col {col} dim {j}"
                    );
                }
                assert!((ta.depth[[ia, 0]] - tb.depth[[ib, 0]]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn deterministic() {
        let s = scene_with_agents(
            vec![vehicle(15.0, 2.0), vehicle(25.0, -3.0)],
            vec![LanePolyline::resampled(
                &(0..20).map(|i| [i as f64 * 3.0, 0.0, 0.0]).collect::<Vec<_>>(),
                0,
            )],
        );
        let cam = CameraModel::default_forward();
        assert_eq!(render_pseudo_image(&s, &cam), render_pseudo_image(&s, &cam));
    }
}
