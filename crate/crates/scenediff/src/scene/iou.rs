//! Oriented-box overlap in the BEV plane.
//!
//! Footprints are convex quadrilaterals; the intersection is computed exactly
//! by Sutherland-Hodgman clipping and the IoU from shoelace areas. Elevation
//! and height play no role here: overlap is a planar notion.

use super::AgentBox;

/// BEV footprint corners of an agent box, counterclockwise.
pub fn obb_corners(b: &AgentBox) -> [[f64; 2]; 4] {
    let (s, c) = b.heading.sin_cos();
    let hl = b.length / 2.0;
    let hw = b.width / 2.0;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 2]; 4];
    for (i, [lx, ly]) in local.into_iter().enumerate() {
        out[i] = [b.x + c * lx - s * ly, b.y + s * lx + c * ly];
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Clip convex polygon `subject` against convex polygon `clip` (both CCW).
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        // Inside = left of directed edge a->b for a CCW clip polygon. Points
        // on the boundary count as inside so identical polygons clip to
        // themselves exactly.
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [b[0] - a[0], b[1] - a[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-30 {
        return q;
    }
    let t = ((a[0] - p[0]) * s[1] - (a[1] - p[1]) * s[0]) / denom;
    [p[0] + t * r[0], p[1] + t * r[1]]
}

/// Intersection-over-union of two oriented-box footprints, in [0, 1].
///
/// Exactly symmetric (arguments are ordered canonically before clipping, so
/// both call orders run the same float ops); exactly 1 for identical
/// footprints and exactly 0 for disjoint ones.
pub fn oriented_box_iou(a: &AgentBox, b: &AgentBox) -> f64 {
    let key = |x: &AgentBox| {
        [
            x.x.to_bits(),
            x.y.to_bits(),
            x.heading.to_bits(),
            x.length.to_bits(),
            x.width.to_bits(),
        ]
    };
    let (a, b) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let pa = obb_corners(a);
    let pb = obb_corners(b);
    let corner_set = |p: &[[f64; 2]; 4]| {
        let mut s: Vec<[u64; 2]> = p.iter().map(|c| [c[0].to_bits(), c[1].to_bits()]).collect();
        s.sort_unstable();
        s
    };
    if corner_set(&pa) == corner_set(&pb) {
        return 1.0;
    }
    let inter = polygon_area(&clip_convex(&pa, &pb));
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = a.length * a.width;
    let area_b = b.length * b.width;
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(x: f64, y: f64, heading: f64, l: f64, w: f64) -> AgentBox {
        AgentBox {
            x,
            y,
            z: 0.0,
            heading,
            length: l,
            width: w,
            height: 1.5,
            speed: 0.0,
            class: AgentClass::Vehicle,
        }
    }

    /// Monte-Carlo area-sampling oracle over the union bounding box.
    pub(crate) fn mc_iou(a: &AgentBox, b: &AgentBox, samples: usize, seed: u64) -> f64 {
        let ca = obb_corners(a);
        let cb = obb_corners(b);
        let xs = ca.iter().chain(cb.iter()).map(|p| p[0]);
        let ys = ca.iter().chain(cb.iter()).map(|p| p[1]);
        let (min_x, max_x) = (
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
        );
        let (min_y, max_y) = (
            ys.clone().fold(f64::INFINITY, f64::min),
            ys.fold(f64::NEG_INFINITY, f64::max),
        );
        let inside = |corners: &[[f64; 2]; 4], p: [f64; 2]| -> bool {
            (0..4).all(|i| {
                let q = corners[i];
                let r = corners[(i + 1) % 4];
                (r[0] - q[0]) * (p[1] - q[1]) - (r[1] - q[1]) * (p[0] - q[0]) >= 0.0
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hit_inter, mut hit_union) = (0u64, 0u64);
        for _ in 0..samples {
            let p = [
                rng.gen_range(min_x..max_x),
                rng.gen_range(min_y..max_y),
            ];
            let ia = inside(&ca, p);
            let ib = inside(&cb, p);
            if ia && ib {
                hit_inter += 1;
            }
            if ia || ib {
                hit_union += 1;
            }
        }
        if hit_union == 0 {
            0.0
        } else {
            hit_inter as f64 / hit_union as f64
        }
    }

    #[test]
    fn identical_boxes_give_one() {
        let a = boxed(3.0, -2.0, 0.7, 4.5, 2.0);
        assert_eq!(oriented_box_iou(&a, &a), 1.0);
    }

    #[test]
    fn distant_boxes_give_zero() {
        let a = boxed(0.0, 0.0, 0.3, 4.5, 2.0);
        let b = boxed(100.0, 0.0, 0.3, 4.5, 2.0);
        assert_eq!(oriented_box_iou(&a, &b), 0.0);
    }

    #[test]
    fn axis_aligned_offset_third() {
        // Two 2x2 squares offset 1 m along x: intersection 1x2 = 2,
        // union 4 + 4 - 2 = 6, IoU = 1/3. Frozen from the Monte-Carlo
        // area-sampling oracle below and the closed form.
        let a = boxed(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = boxed(1.0, 0.0, 0.0, 2.0, 2.0);
        let iou = oriented_box_iou(&a, &b);
        assert!((iou - 1.0 / 3.0).abs() < 1e-12, "iou = {iou}");
        let oracle = mc_iou(&a, &b, 1_000_000, 17);
        assert!((oracle - 1.0 / 3.0).abs() < 2e-3, "oracle = {oracle}");
    }

    #[test]
    fn symmetric_and_bounded_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let a = boxed(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.14..3.14),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.5..3.0),
            );
            let b = boxed(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.14..3.14),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.5..3.0),
            );
            let ab = oriented_box_iou(&a, &b);
            let ba = oriented_box_iou(&b, &a);
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            assert_eq!(oriented_box_iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn matches_monte_carlo_oracle() {
        // Cheap version of the 1000-pair acceptance check (full run lives in
        // the acceptance suite).
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..50 {
            let a = boxed(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.14..3.14),
                rng.gen_range(1.0..5.0),
                rng.gen_range(1.0..3.0),
            );
            let b = boxed(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.14..3.14),
                rng.gen_range(1.0..5.0),
                rng.gen_range(1.0..3.0),
            );
            let exact = oriented_box_iou(&a, &b);
            let approx = mc_iou(&a, &b, 200_000, 1000 + i);
            assert!(
                (exact - approx).abs() < 0.01,
                "pair {i}: exact {exact} vs mc {approx}"
            );
        }
    }

    #[test]
    fn rotated_overlap_is_positive() {
        let a = boxed(0.0, 0.0, 0.0, 4.0, 2.0);
        let b = boxed(0.5, 0.3, std::f64::consts::FRAC_PI_4, 4.0, 2.0);
        let iou = oriented_box_iou(&a, &b);
        assert!(iou > 0.1 && iou < 1.0);
    }
}
