//! Canonical 64 m x 64 m crops of an ego-frame scene.

use super::frame::resample_polyline;
use super::{Bounds, LayoutKind, SceneGraph};
use crate::error::{Error, Result};

/// Side length of the canonical window, meters.
pub const CROP_SIZE: f64 = 64.0;

/// Rear margin behind the ego in the forward-only layout, meters.
pub const FORWARD_REAR_MARGIN: f64 = 4.0;

pub fn layout_bounds(layout: LayoutKind) -> Bounds {
    match layout {
        LayoutKind::EgoCentered => Bounds {
            min_x: -CROP_SIZE / 2.0,
            max_x: CROP_SIZE / 2.0,
            min_y: -CROP_SIZE / 2.0,
            max_y: CROP_SIZE / 2.0,
        },
        LayoutKind::ForwardOnly => Bounds {
            min_x: -FORWARD_REAR_MARGIN,
            max_x: CROP_SIZE - FORWARD_REAR_MARGIN,
            min_y: -CROP_SIZE / 2.0,
            max_y: CROP_SIZE / 2.0,
        },
    }
}

/// Crop an ego-frame scene to the canonical window for `layout`.
///
/// Agents whose center falls outside the window are removed (the ego is always
/// retained); lanes are clipped to the window and arc-length resampled. Lanes
/// that leave no in-window geometry are dropped; dropping all lanes is a
/// degenerate-scene error.
pub fn crop_scene(scene: &SceneGraph, layout: LayoutKind) -> Result<SceneGraph> {
    let bounds = layout_bounds(layout);
    let mut out = scene.clone();
    out.layout = layout;
    out.bounds = bounds;

    let ego = *scene.ego()?;
    out.agents = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, a)| *i == 0 || bounds.contains(a.x, a.y))
        .map(|(_, a)| *a)
        .collect();
    // The ego sits at the origin in the ego frame; both layouts contain it.
    debug_assert!(bounds.contains(ego.x, ego.y));

    let mut lanes = Vec::new();
    for lane in &scene.lanes {
        if let Some(clipped) = clip_polyline(&lane.points, &bounds) {
            lanes.push(resample_polyline(&clipped, lane.lane_id));
        }
    }
    if lanes.is_empty() {
        return Err(Error::Degenerate(
            "all lanes clipped away by the crop window".into(),
        ));
    }
    let kept: std::collections::HashSet<u32> = lanes.iter().map(|l| l.lane_id).collect();
    out.lanes = lanes;
    out.connectivity.edges.retain(|(a, b)| kept.contains(a) && kept.contains(b));
    Ok(out)
}

/// Clip a polyline to the window, keeping the longest in-window piece.
///
/// Returns None when no segment of positive length survives.
fn clip_polyline(points: &[[f64; 3]], b: &Bounds) -> Option<Vec<[f64; 3]>> {
    let mut pieces: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut cur: Vec<[f64; 3]> = Vec::new();
    for w in points.windows(2) {
        let (p, q) = (w[0], w[1]);
        match clip_segment(p, q, b) {
            Some((a, c)) => {
                if cur.is_empty() {
                    cur.push(a);
                } else {
                    let last = *cur.last().unwrap();
                    if dist2(last, a) > 1e-18 {
                        // Discontinuity: the polyline left and re-entered.
                        pieces.push(std::mem::take(&mut cur));
                        cur.push(a);
                    }
                }
                cur.push(c);
            }
            None => {
                if !cur.is_empty() {
                    pieces.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
        .into_iter()
        .filter(|p| polyline_len(p) > 1e-9)
        .max_by(|a, b| polyline_len(a).total_cmp(&polyline_len(b)))
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn polyline_len(p: &[[f64; 3]]) -> f64 {
    p.windows(2).map(|w| dist2(w[0], w[1]).sqrt()).sum()
}

/// Liang-Barsky clip of one segment against the window rectangle.
fn clip_segment(p: [f64; 3], q: [f64; 3], b: &Bounds) -> Option<([f64; 3], [f64; 3])> {
    let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, p[0] - b.min_x),
        (dx, b.max_x - p[0]),
        (-dy, p[1] - b.min_y),
        (dy, b.max_y - p[1]),
    ];
    for (den, num) in checks {
        if den.abs() < 1e-15 {
            if num < 0.0 {
                return None;
            }
        } else {
            let t = num / den;
            if den < 0.0 {
                if t > t1 {
                    return None;
                }
                if t > t0 {
                    t0 = t;
                }
            } else {
                if t < t0 {
                    return None;
                }
                if t < t1 {
                    t1 = t;
                }
            }
        }
    }
    let at = |t: f64| [p[0] + t * dx, p[1] + t * dy, p[2] + t * dz];
    Some((at(t0), at(t1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        AgentBox, AgentClass, ConnectivityGraph, DomainTag, LanePolyline, SCENE_SCHEMA_VERSION,
    };

    fn base_scene() -> SceneGraph {
        let ego = AgentBox {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            heading: 0.0,
            length: 4.5,
            width: 2.0,
            height: 1.6,
            speed: 5.0,
            class: AgentClass::Vehicle,
        };
        let far = AgentBox { x: 45.0, ..ego };
        let near = AgentBox { x: 10.0, y: 3.5, ..ego };
        let pts: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 * 3.0 - 50.0, 0.0, 0.0]).collect();
        SceneGraph {
            schema: SCENE_SCHEMA_VERSION,
            agents: vec![ego, far, near],
            lanes: vec![LanePolyline::resampled(&pts, 0)],
            connectivity: ConnectivityGraph::default(),
            layout: LayoutKind::EgoCentered,
            domain: DomainTag::Metro,
            bounds: layout_bounds(LayoutKind::EgoCentered),
            original_pose: None,
        }
    }

    #[test]
    fn ego_centered_bounds() {
        let c = crop_scene(&base_scene(), LayoutKind::EgoCentered).unwrap();
        assert_eq!(c.bounds.min_x, -32.0);
        assert_eq!(c.bounds.max_x, 32.0);
        assert_eq!(c.bounds.min_y, -32.0);
        assert_eq!(c.bounds.max_y, 32.0);
        let (w, h) = c.bounds.side_lengths();
        assert_eq!((w, h), (64.0, 64.0));
    }

    #[test]
    fn forward_only_bounds() {
        let c = crop_scene(&base_scene(), LayoutKind::ForwardOnly).unwrap();
        assert_eq!(c.bounds.min_x, -4.0);
        assert_eq!(c.bounds.max_x, 60.0);
        assert_eq!(c.bounds.min_y, -32.0);
        assert_eq!(c.bounds.max_y, 32.0);
    }

    #[test]
    fn agent_outside_window_removed() {
        let c = crop_scene(&base_scene(), LayoutKind::EgoCentered).unwrap();
        // x = 45 is outside the ego-centered window but inside forward-only.
        assert_eq!(c.agents.len(), 2);
        let f = crop_scene(&base_scene(), LayoutKind::ForwardOnly).unwrap();
        assert_eq!(f.agents.len(), 3);
    }

    #[test]
    fn lanes_clipped_and_resampled() {
        let c = crop_scene(&base_scene(), LayoutKind::EgoCentered).unwrap();
        assert_eq!(c.lanes.len(), 1);
        let l = &c.lanes[0];
        l.validate().unwrap();
        for p in &l.points {
            assert!(c.bounds.contains(p[0], p[1]));
        }
    }

    #[test]
    fn crop_is_idempotent() {
        let once = crop_scene(&base_scene(), LayoutKind::ForwardOnly).unwrap();
        let twice = crop_scene(&once, LayoutKind::ForwardOnly).unwrap();
        assert_eq!(once.agents, twice.agents);
        for (a, b) in once.lanes.iter().zip(twice.lanes.iter()) {
            for (pa, pb) in a.points.iter().zip(b.points.iter()) {
                assert!((pa[0] - pb[0]).abs() < 1e-9);
                assert!((pa[1] - pb[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_lanes_clipped_is_degenerate() {
        let mut s = base_scene();
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [100.0 + i as f64, 100.0, 0.0]).collect();
        s.lanes = vec![LanePolyline::resampled(&pts, 0)];
        assert!(matches!(
            crop_scene(&s, LayoutKind::EgoCentered),
            Err(Error::Degenerate(_))
        ));
    }
}
