//! SVG renderer for BEV scenes: lanes grey, ego red, other agents blue.

use super::{obb_corners, SceneGraph};

const PX_PER_METER: f64 = 8.0;

/// Render a BEV scene to an SVG document string.
///
/// `header_comment` is embedded verbatim as an XML comment (used for run
/// provenance).
pub fn render_scene_svg(scene: &SceneGraph, header_comment: Option<&str>) -> String {
    let b = scene.bounds;
    let w = (b.max_x - b.min_x) * PX_PER_METER;
    let h = (b.max_y - b.min_y) * PX_PER_METER;
    // BEV x (forward) points right, y (left) points up in the image.
    let tx = |x: f64| (x - b.min_x) * PX_PER_METER;
    let ty = |y: f64| (b.max_y - y) * PX_PER_METER;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    if let Some(c) = header_comment {
        s.push_str(&format!("<!-- {} -->\n", c.replace("--", "-")));
    }
    s.push_str(&format!(
        "<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#f7f7f7\"/>\n"
    ));

    for lane in &scene.lanes {
        let pts: Vec<String> = lane
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", tx(p[0]), ty(p[1])))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#9a9a9a\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
    }

    for (i, agent) in scene.agents.iter().enumerate() {
        let corners = obb_corners(agent);
        let pts: Vec<String> = corners
            .iter()
            .map(|p| format!("{:.2},{:.2}", tx(p[0]), ty(p[1])))
            .collect();
        let fill = if i == 0 { "#d62728" } else { "#1f77b4" };
        s.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{fill}\" fill-opacity=\"0.85\" stroke=\"#333\" stroke-width=\"1\"/>\n",
            pts.join(" ")
        ));
        // Heading tick from the center to the front edge midpoint.
        let (sh, ch) = agent.heading.sin_cos();
        let fx = agent.x + ch * agent.length / 2.0;
        let fy = agent.y + sh * agent.length / 2.0;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#222\" stroke-width=\"1\"/>\n",
            tx(agent.x), ty(agent.y), tx(fx), ty(fy)
        ));
    }

    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        AgentBox, AgentClass, Bounds, ConnectivityGraph, DomainTag, LanePolyline, LayoutKind,
        SCENE_SCHEMA_VERSION,
    };

    #[test]
    fn svg_has_tinting_convention() {
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
        let other = AgentBox { x: 8.0, ..ego };
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 * 2.0 - 16.0, 0.0, 0.0]).collect();
        let scene = SceneGraph {
            schema: SCENE_SCHEMA_VERSION,
            agents: vec![ego, other],
            lanes: vec![LanePolyline::resampled(&pts, 0)],
            connectivity: ConnectivityGraph::default(),
            layout: LayoutKind::EgoCentered,
            domain: DomainTag::Metro,
            bounds: Bounds { min_x: -32.0, max_x: 32.0, min_y: -32.0, max_y: 32.0 },
            original_pose: None,
        };
        let svg = render_scene_svg(&scene, Some("digest=abc seed=1"));
        assert!(svg.contains("#d62728")); // ego red
        assert!(svg.contains("#1f77b4")); // agents blue
        assert!(svg.contains("#9a9a9a")); // lanes grey
        assert!(svg.contains("digest=abc"));
    }
}
