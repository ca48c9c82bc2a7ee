//! Rigid-frame changes: world frame <-> ego frame.

use super::{SceneGraph, LanePolyline};
use crate::error::Result;
use serde::{Deserialize, Serialize};

/// Rigid 2D pose (position + heading) of the ego in the source frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Normalize an angle into (-pi, pi].
pub fn normalize_heading(h: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = h % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Rigidly transform the scene so the ego sits at the origin with heading 0.
///
/// The applied pose is recorded in `original_pose`, composed with any pose
/// already stored, so the transform stays invertible.
pub fn to_ego_frame(scene: &SceneGraph) -> Result<SceneGraph> {
    let ego = scene.ego()?;
    let pose = EgoPose {
        x: ego.x,
        y: ego.y,
        heading: ego.heading,
    };
    let (s, c) = pose.heading.sin_cos();
    let rot = |x: f64, y: f64| -> (f64, f64) {
        let dx = x - pose.x;
        let dy = y - pose.y;
        (c * dx + s * dy, -s * dx + c * dy)
    };

    let mut out = scene.clone();
    for a in &mut out.agents {
        let (x, y) = rot(a.x, a.y);
        a.x = x;
        a.y = y;
        a.heading = normalize_heading(a.heading - pose.heading);
    }
    for l in &mut out.lanes {
        for p in &mut l.points {
            let (x, y) = rot(p[0], p[1]);
            p[0] = x;
            p[1] = y;
        }
    }
    out.original_pose = Some(compose(scene.original_pose, pose));
    Ok(out)
}

/// Invert [`to_ego_frame`] using the stored pose.
pub fn from_ego_frame(scene: &SceneGraph) -> Result<SceneGraph> {
    let pose = match scene.original_pose {
        Some(p) => p,
        None => return Ok(scene.clone()),
    };
    let (s, c) = pose.heading.sin_cos();
    let unrot = |x: f64, y: f64| -> (f64, f64) { (pose.x + c * x - s * y, pose.y + s * x + c * y) };

    let mut out = scene.clone();
    for a in &mut out.agents {
        let (x, y) = unrot(a.x, a.y);
        a.x = x;
        a.y = y;
        a.heading = normalize_heading(a.heading + pose.heading);
    }
    for l in &mut out.lanes {
        for p in &mut l.points {
            let (x, y) = unrot(p[0], p[1]);
            p[0] = x;
            p[1] = y;
        }
    }
    out.original_pose = None;
    Ok(out)
}

fn compose(prev: Option<EgoPose>, applied: EgoPose) -> EgoPose {
    match prev {
        None => applied,
        Some(p) => {
            // The scene was already the image of an original under `p`; the new
            // pose maps original coordinates through both transforms.
            let (s, c) = p.heading.sin_cos();
            EgoPose {
                x: p.x + c * applied.x - s * applied.y,
                y: p.y + s * applied.x + c * applied.y,
                heading: normalize_heading(p.heading + applied.heading),
            }
        }
    }
}

/// Resample helper shared by crop: keeps the polyline type invariant intact.
pub(crate) fn resample_polyline(points: &[[f64; 3]], lane_id: u32) -> LanePolyline {
    LanePolyline::resampled(points, lane_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        AgentBox, AgentClass, Bounds, ConnectivityGraph, DomainTag, LanePolyline, LayoutKind,
        SCENE_SCHEMA_VERSION,
    };

    fn agent(x: f64, y: f64, heading: f64) -> AgentBox {
        AgentBox {
            x,
            y,
            z: 0.0,
            heading,
            length: 4.5,
            width: 2.0,
            height: 1.6,
            speed: 5.0,
            class: AgentClass::Vehicle,
        }
    }

    fn lane_along_x(lane_id: u32) -> LanePolyline {
        let pts: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 * 2.0 - 30.0, 0.0, 0.0]).collect();
        LanePolyline::resampled(&pts, lane_id)
    }

    fn scene_with(agents: Vec<AgentBox>) -> SceneGraph {
        SceneGraph {
            schema: SCENE_SCHEMA_VERSION,
            agents,
            lanes: vec![lane_along_x(0)],
            connectivity: ConnectivityGraph::default(),
            layout: LayoutKind::EgoCentered,
            domain: DomainTag::Metro,
            bounds: Bounds {
                min_x: -32.0,
                max_x: 32.0,
                min_y: -32.0,
                max_y: 32.0,
            },
            original_pose: None,
        }
    }

    #[test]
    fn already_ego_centered_is_identity() {
        let s = scene_with(vec![agent(0.0, 0.0, 0.0), agent(5.0, 1.0, 0.3)]);
        let t = to_ego_frame(&s).unwrap();
        for (a, b) in s.agents.iter().zip(t.agents.iter()) {
            assert!((a.x - b.x).abs() < 1e-12);
            assert!((a.y - b.y).abs() < 1e-12);
            assert!((a.heading - b.heading).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_translation() {
        let s = scene_with(vec![agent(10.0, 0.0, 0.0), agent(12.0, 0.0, 0.0)]);
        let t = to_ego_frame(&s).unwrap();
        assert!((t.agents[1].x - 2.0).abs() < 1e-12);
        assert!((t.agents[1].y - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_by_half_pi() {
        // Ego heading pi/2 (facing +y), agent 3 m north of ego: in the ego
        // frame the agent is 3 m straight ahead, i.e. at (3, 0).
        let s = scene_with(vec![
            agent(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            agent(0.0, 3.0, std::f64::consts::FRAC_PI_2),
        ]);
        let t = to_ego_frame(&s).unwrap();
        assert!((t.agents[1].x - 3.0).abs() < 1e-12);
        assert!(t.agents[1].y.abs() < 1e-12);
        assert!(t.agents[1].heading.abs() < 1e-12);
    }

    #[test]
    fn missing_ego_is_structural_error() {
        let s = scene_with(vec![]);
        assert!(to_ego_frame(&s).is_err());
    }

    #[test]
    fn round_trip_restores_coordinates() {
        let s = scene_with(vec![agent(7.0, -3.0, 1.1), agent(12.0, 4.0, -0.4)]);
        let t = to_ego_frame(&s).unwrap();
        let back = from_ego_frame(&t).unwrap();
        for (a, b) in s.agents.iter().zip(back.agents.iter()) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
            assert!((a.heading - b.heading).abs() < 1e-9);
        }
        for (la, lb) in s.lanes.iter().zip(back.lanes.iter()) {
            for (pa, pb) in la.points.iter().zip(lb.points.iter()) {
                assert!((pa[0] - pb[0]).abs() < 1e-9);
                assert!((pa[1] - pb[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn heading_normalization() {
        assert!((normalize_heading(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        let h = normalize_heading(-std::f64::consts::PI);
        assert!((h - std::f64::consts::PI).abs() < 1e-12);
        assert!((normalize_heading(0.5) - 0.5).abs() < 1e-15);
    }
}
