//! Pinhole camera model and BEV-to-camera wireframe projection.
//!
//! Ego frame: x forward, y left, z up. Camera frame: x right, y down,
//! z forward (optical axis). A camera pose places the optical center in the
//! ego frame and yaws it about the vertical axis.

use super::{SceneGraph, obb_corners};
use serde::{Deserialize, Serialize};

/// Distance of the near clipping plane in front of the camera, meters.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length, pixels.
    pub focal: f64,
    /// Principal point (u, v), pixels.
    pub principal: [f64; 2],
    /// Image (width, height), pixels.
    pub image_size: [u32; 2],
    /// Optical center in the ego frame, meters.
    pub position: [f64; 3],
    /// Yaw of the optical axis in the BEV plane, radians (0 = ego forward).
    pub yaw: f64,
}

impl CameraModel {
    /// Forward camera with a 90 degree horizontal field of view on a 16:9
    /// image, mounted 1.5 m above the ego origin.
    pub fn default_forward() -> CameraModel {
        let width = 640u32;
        let height = 360u32;
        CameraModel {
            focal: width as f64 / 2.0, // f = (W/2) / tan(45 deg)
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            image_size: [width, height],
            position: [0.0, 0.0, 1.5],
            yaw: 0.0,
        }
    }

    /// Same camera rigidly attached to an arbitrary BEV pose.
    pub fn attached_to(x: f64, y: f64, heading: f64) -> CameraModel {
        CameraModel {
            position: [x, y, 1.5],
            yaw: heading,
            ..CameraModel::default_forward()
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        if self.focal <= 0.0 {
            return Err(crate::error::Error::Structural("focal length must be positive".into()));
        }
        let [u, v] = self.principal;
        if u < 0.0 || u > self.image_size[0] as f64 || v < 0.0 || v > self.image_size[1] as f64 {
            return Err(crate::error::Error::Structural(
                "principal point outside image".into(),
            ));
        }
        Ok(())
    }

    /// Ego-frame point -> camera-frame point (x right, y down, z forward).
    pub fn to_camera_frame(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        let dz = p[2] - self.position[2];
        let (s, c) = self.yaw.sin_cos();
        let fwd = c * dx + s * dy;
        let left = -s * dx + c * dy;
        [-left, -dz, fwd]
    }

    pub fn in_image(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0
            && uv[0] <= self.image_size[0] as f64
            && uv[1] >= 0.0
            && uv[1] <= self.image_size[1] as f64
    }
}

/// Project an ego-frame point; returns pixel coordinates and camera depth,
/// or None when the point is on or behind the near plane.
pub fn project_point(cam: &CameraModel, p: [f64; 3]) -> Option<([f64; 2], f64)> {
    let c = cam.to_camera_frame(p);
    if c[2] < NEAR_PLANE {
        return None;
    }
    let u = cam.principal[0] + cam.focal * c[0] / c[2];
    let v = cam.principal[1] + cam.focal * c[1] / c[2];
    Some(([u, v], c[2]))
}

/// One projected line segment with a visibility flag (true when the segment
/// touches the image rectangle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireSegment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub visible: bool,
}

/// Camera-space wireframe of one scene frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireframeImage {
    pub segments: Vec<WireSegment>,
}

/// Render a scene as projected cuboid edges (agents) and polylines (lanes).
///
/// Segments fully behind the near plane are culled; partially visible ones
/// are clipped at the near plane before projection.
pub fn bev_to_camera_wireframe(scene: &SceneGraph, cam: &CameraModel) -> WireframeImage {
    let mut out = WireframeImage::default();
    for agent in &scene.agents {
        let base = obb_corners(agent);
        let z0 = agent.z;
        let z1 = agent.z + agent.height;
        let mut pts = [[0.0f64; 3]; 8];
        for i in 0..4 {
            pts[i] = [base[i][0], base[i][1], z0];
            pts[i + 4] = [base[i][0], base[i][1], z1];
        }
        const EDGES: [(usize, usize); 12] = [
            (0, 1), (1, 2), (2, 3), (3, 0), // bottom
            (4, 5), (5, 6), (6, 7), (7, 4), // top
            (0, 4), (1, 5), (2, 6), (3, 7), // verticals
        ];
        for (i, j) in EDGES {
            push_segment(&mut out, cam, pts[i], pts[j]);
        }
    }
    for lane in &scene.lanes {
        for w in lane.points.windows(2) {
            push_segment(&mut out, cam, w[0], w[1]);
        }
    }
    out
}

fn push_segment(out: &mut WireframeImage, cam: &CameraModel, p: [f64; 3], q: [f64; 3]) {
    let cp = cam.to_camera_frame(p);
    let cq = cam.to_camera_frame(q);
    let (cp, cq) = match clip_near(cp, cq) {
        Some(pair) => pair,
        None => return,
    };
    let proj = |c: [f64; 3]| -> [f64; 2] {
        [
            cam.principal[0] + cam.focal * c[0] / c[2],
            cam.principal[1] + cam.focal * c[1] / c[2],
        ]
    };
    let a = proj(cp);
    let b = proj(cq);
    let visible = segment_touches_image(cam, a, b);
    out.segments.push(WireSegment { a, b, visible });
}

/// Clip a camera-frame segment to z >= NEAR_PLANE. None when fully behind.
fn clip_near(p: [f64; 3], q: [f64; 3]) -> Option<([f64; 3], [f64; 3])> {
    let (zp, zq) = (p[2], q[2]);
    if zp < NEAR_PLANE && zq < NEAR_PLANE {
        return None;
    }
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| {
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    };
    let mut p2 = p;
    let mut q2 = q;
    if zp < NEAR_PLANE {
        let t = (NEAR_PLANE - zp) / (zq - zp);
        p2 = lerp(p, q, t);
    } else if zq < NEAR_PLANE {
        let t = (NEAR_PLANE - zq) / (zp - zq);
        q2 = lerp(q, p, t);
    }
    Some((p2, q2))
}

fn segment_touches_image(cam: &CameraModel, a: [f64; 2], b: [f64; 2]) -> bool {
    if cam.in_image(a) || cam.in_image(b) {
        return true;
    }
    // Conservative: test intersection with the image rectangle edges.
    let w = cam.image_size[0] as f64;
    let h = cam.image_size[1] as f64;
    let corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for i in 0..4 {
        if segments_cross(a, b, corners[i], corners[(i + 1) % 4]) {
            return true;
        }
    }
    false
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])
    };
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        AgentBox, AgentClass, Bounds, ConnectivityGraph, DomainTag, LanePolyline, LayoutKind,
        SceneGraph, SCENE_SCHEMA_VERSION,
    };

    fn empty_scene() -> SceneGraph {
        let ego = AgentBox {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            heading: 0.0,
            length: 4.5,
            width: 2.0,
            height: 1.6,
            speed: 0.0,
            class: AgentClass::Vehicle,
        };
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        SceneGraph {
            schema: SCENE_SCHEMA_VERSION,
            agents: vec![ego],
            lanes: vec![LanePolyline::resampled(&pts, 0)],
            connectivity: ConnectivityGraph::default(),
            layout: LayoutKind::ForwardOnly,
            domain: DomainTag::Metro,
            bounds: Bounds { min_x: -4.0, max_x: 60.0, min_y: -32.0, max_y: 32.0 },
            original_pose: None,
        }
    }

    #[test]
    fn pinhole_ground_point() {
        // Point 10 m ahead on the ground, camera 1.5 m up, focal 500,
        // principal (400, 225): v = 225 + 500 * 1.5 / 10 = 300.
        let cam = CameraModel {
            focal: 500.0,
            principal: [400.0, 225.0],
            image_size: [800, 450],
            position: [0.0, 0.0, 1.5],
            yaw: 0.0,
        };
        let (uv, depth) = project_point(&cam, [10.0, 0.0, 0.0]).unwrap();
        assert!((uv[0] - 400.0).abs() < 1e-12);
        assert!((uv[1] - 300.0).abs() < 1e-12);
        assert!((depth - 10.0).abs() < 1e-12);
    }

    #[test]
    fn point_behind_camera_is_culled() {
        let cam = CameraModel::default_forward();
        assert!(project_point(&cam, [-5.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn empty_scene_gives_empty_segments() {
        let mut s = empty_scene();
        s.agents.clear();
        s.lanes.clear();
        let w = bev_to_camera_wireframe(&s, &CameraModel::default_forward());
        assert!(w.segments.is_empty());
    }

    #[test]
    fn focal_scaling_scales_pixel_offsets() {
        let cam = CameraModel::default_forward();
        let mut cam2 = cam;
        cam2.focal *= 3.0;
        for p in [[12.0, 3.0, 0.5], [30.0, -8.0, 2.0], [5.0, 1.0, 0.0]] {
            let (uv1, _) = project_point(&cam, p).unwrap();
            let (uv2, _) = project_point(&cam2, p).unwrap();
            for k in 0..2 {
                let off1 = uv1[k] - cam.principal[k];
                let off2 = uv2[k] - cam2.principal[k];
                assert!((off2 - 3.0 * off1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn partially_behind_segment_is_clipped() {
        let cam = CameraModel::default_forward();
        let mut out = WireframeImage::default();
        push_segment(&mut out, &cam, [-5.0, 0.0, 0.0], [10.0, 0.0, 0.0]);
        assert_eq!(out.segments.len(), 1);
        push_segment(&mut out, &cam, [-5.0, 0.0, 0.0], [-10.0, 0.0, 0.0]);
        assert_eq!(out.segments.len(), 1); // fully behind: culled
    }

    #[test]
    fn wireframe_counts_cuboid_edges() {
        let s = empty_scene();
        let w = bev_to_camera_wireframe(&s, &CameraModel::default_forward());
        // Ego cuboid contributes up to 12 edges; lane contributes segments.
        assert!(!w.segments.is_empty());
    }
}
