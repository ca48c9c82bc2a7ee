//! Vectorized scene-graph types and geometric operations.
//!
//! A scene is a set of oriented agent boxes (with elevation and height), lane
//! centerline polylines, and a lane connectivity graph, all expressed in a
//! metric bird's-eye-view frame. Scenes are cropped to a 64 m x 64 m window
//! before entering the model.

mod camera;
mod crop;
mod frame;
mod iou;
mod svg;

pub use camera::{bev_to_camera_wireframe, project_point, CameraModel, WireSegment, WireframeImage, NEAR_PLANE};
pub use crop::{crop_scene, layout_bounds, CROP_SIZE};
pub use frame::{normalize_heading, to_ego_frame, EgoPose};
pub use iou::{obb_corners, oriented_box_iou};
pub use svg::render_scene_svg;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of resampled points per lane polyline.
pub const LANE_POINTS: usize = 20;

/// Maximum gap between consecutive polyline points, meters.
pub const MAX_POINT_SPACING: f64 = 8.0;

/// Agent semantic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Static,
}

impl AgentClass {
    pub fn index(self) -> usize {
        match self {
            AgentClass::Vehicle => 0,
            AgentClass::Pedestrian => 1,
            AgentClass::Static => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(AgentClass::Vehicle),
            1 => Ok(AgentClass::Pedestrian),
            2 => Ok(AgentClass::Static),
            _ => Err(Error::Input(format!("unknown agent class index {i}"))),
        }
    }
}

/// Oriented agent box in the BEV plane, augmented with elevation and height.
///
/// `z` is the elevation of the box bottom; `heading` is normalized into
/// (-pi, pi]. Extents are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub speed: f64,
    pub class: AgentClass,
}

impl AgentBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Structural(format!(
                "agent extents must be positive, got l={} w={} h={}",
                self.length, self.width, self.height
            )));
        }
        if self.speed < 0.0 {
            return Err(Error::Structural(format!("negative speed {}", self.speed)));
        }
        if !(self.heading > -std::f64::consts::PI - 1e-12
            && self.heading <= std::f64::consts::PI + 1e-12)
        {
            return Err(Error::Structural(format!(
                "heading {} outside (-pi, pi]",
                self.heading
            )));
        }
        for v in [self.x, self.y, self.z, self.heading, self.speed] {
            if !v.is_finite() {
                return Err(Error::Structural("non-finite agent field".into()));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Ordered lane centerline with per-point elevation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub lane_id: u32,
    /// Exactly [`LANE_POINTS`] points of (x, y, z) meters.
    pub points: Vec<[f64; 3]>,
}

impl LanePolyline {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != LANE_POINTS {
            return Err(Error::Structural(format!(
                "lane {} has {} points, expected {LANE_POINTS}",
                self.lane_id,
                self.points.len()
            )));
        }
        for w in self.points.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            if (dx * dx + dy * dy).sqrt() > MAX_POINT_SPACING + 1e-9 {
                return Err(Error::Structural(format!(
                    "lane {} point spacing exceeds {MAX_POINT_SPACING} m",
                    self.lane_id
                )));
            }
        }
        Ok(())
    }

    /// Total arc length in the BEV plane.
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let dx = w[1][0] - w[0][0];
                let dy = w[1][1] - w[0][1];
                (dx * dx + dy * dy).sqrt()
            })
            .sum()
    }

    /// Point at arc-length position `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> [f64; 3] {
        if s <= 0.0 {
            return self.points[0];
        }
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let seg = (dx * dx + dy * dy).sqrt();
            if acc + seg >= s && seg > 0.0 {
                let t = (s - acc) / seg;
                return [
                    w[0][0] + t * dx,
                    w[0][1] + t * dy,
                    w[0][2] + t * (w[1][2] - w[0][2]),
                ];
            }
            acc += seg;
        }
        *self.points.last().unwrap()
    }

    /// Unit tangent (BEV) at arc-length position `s`.
    pub fn tangent_at(&self, s: f64) -> (f64, f64) {
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let seg = (dx * dx + dy * dy).sqrt();
            if (acc + seg >= s || acc + seg >= self.arc_length() - 1e-9) && seg > 0.0 {
                return (dx / seg, dy / seg);
            }
            acc += seg;
        }
        (1.0, 0.0)
    }

    /// Resample to [`LANE_POINTS`] points uniform in arc length.
    pub fn resampled(points: &[[f64; 3]], lane_id: u32) -> LanePolyline {
        let raw = LanePolyline {
            lane_id,
            points: points.to_vec(),
        };
        let total = raw.arc_length();
        let pts = (0..LANE_POINTS)
            .map(|i| raw.point_at(total * i as f64 / (LANE_POINTS - 1) as f64))
            .collect();
        LanePolyline { lane_id, points: pts }
    }
}

/// Directed lane successor relation: (pred_lane_id, succ_lane_id).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    pub edges: Vec<(u32, u32)>,
}

impl ConnectivityGraph {
    pub fn validate(&self, lanes: &[LanePolyline]) -> Result<()> {
        let ids: std::collections::HashSet<u32> = lanes.iter().map(|l| l.lane_id).collect();
        for &(a, b) in &self.edges {
            if a == b {
                return Err(Error::Structural(format!("self-loop on lane {a}")));
            }
            if !ids.contains(&a) || !ids.contains(&b) {
                return Err(Error::Structural(format!(
                    "connectivity edge ({a}, {b}) references missing lane"
                )));
            }
        }
        Ok(())
    }

    pub fn successors(&self, lane_id: u32) -> impl Iterator<Item = u32> + '_ {
        self.edges
            .iter()
            .filter(move |(p, _)| *p == lane_id)
            .map(|(_, s)| *s)
    }
}

/// Canonical crop layouts. The window is always 64 m x 64 m in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Ego at the window center: x, y in [-32, 32].
    EgoCentered,
    /// Ego 4 m from the rear edge: x in [-4, 60], y in [-32, 32].
    ForwardOnly,
}

/// Axis-aligned window in the ego frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn side_lengths(&self) -> (f64, f64) {
        (self.max_x - self.min_x, self.max_y - self.min_y)
    }
}

/// Synthetic domain tag (stands in for a city/region label).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Metro,
    Suburb,
}

impl DomainTag {
    pub fn index(self) -> usize {
        match self {
            DomainTag::Metro => 0,
            DomainTag::Suburb => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(DomainTag::Metro),
            1 => Ok(DomainTag::Suburb),
            _ => Err(Error::Input(format!("domain index {i} out of range"))),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            DomainTag::Metro => "metro",
            DomainTag::Suburb => "suburb",
        }
    }
}

/// Schema version written into every serialized scene.
pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// The full vectorized scene: agents (agents[0] is ego), lanes, connectivity.
///
/// Units are meters and radians throughout. `original_pose` stores the rigid
/// transform that was applied by [`to_ego_frame`], so it can be inverted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub agents: Vec<AgentBox>,
    pub lanes: Vec<LanePolyline>,
    pub connectivity: ConnectivityGraph,
    pub layout: LayoutKind,
    pub domain: DomainTag,
    pub bounds: Bounds,
    /// Pose of the ego in the frame the scene was originally expressed in;
    /// identity once the scene is in the ego frame with no history.
    #[serde(default)]
    pub original_pose: Option<EgoPose>,
}

fn default_schema() -> u32 {
    SCENE_SCHEMA_VERSION
}

impl SceneGraph {
    pub fn ego(&self) -> Result<&AgentBox> {
        self.agents
            .first()
            .ok_or_else(|| Error::Structural("scene has no agents (missing ego)".into()))
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Structural("scene must contain the ego agent".into()));
        }
        if self.lanes.is_empty() {
            return Err(Error::Structural("scene must contain at least one lane".into()));
        }
        for a in &self.agents {
            a.validate()?;
        }
        for l in &self.lanes {
            l.validate()?;
        }
        self.connectivity.validate(&self.lanes)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Into::into)
    }

    pub fn from_json(s: &str) -> Result<SceneGraph> {
        let scene: SceneGraph = serde_json::from_str(s)?;
        if scene.schema != SCENE_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported scene schema {} (expected {SCENE_SCHEMA_VERSION})",
                scene.schema
            )));
        }
        Ok(scene)
    }
}
