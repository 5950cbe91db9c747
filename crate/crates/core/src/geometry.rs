//! Rectangle and covered-area geometry: corner offsets for reference-point
//! measurement models, polygon containment and signed boundary distance.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::types::{ReferencePoint, StateVec, CORNERS};

pub type Point = Vector2<f64>;

/// Lateral sign of a vertex: +1 for the left corners, -1 for the right.
fn lateral_sign(zeta: ReferencePoint) -> f64 {
    match zeta {
        ReferencePoint::Bl | ReferencePoint::Fl => 1.0,
        ReferencePoint::Br | ReferencePoint::Fr => -1.0,
        ReferencePoint::Center => 0.0,
    }
}

/// Longitudinal sign of a vertex: +1 for the front corners, -1 for the back.
fn longitudinal_sign(zeta: ReferencePoint) -> f64 {
    match zeta {
        ReferencePoint::Fl | ReferencePoint::Fr => 1.0,
        ReferencePoint::Bl | ReferencePoint::Br => -1.0,
        ReferencePoint::Center => 0.0,
    }
}

/// Offset from the rectangle center to the vertex `zeta`, for an object with
/// the given heading and extent. Adding the offset to the center yields the
/// corner position.
pub fn corner_offset(zeta: ReferencePoint, heading: f64, width: f64, length: f64) -> Result<Point> {
    if !zeta.is_corner() {
        return Err(Error::InvalidReferencePoint(
            "corner offset requires a rectangle vertex".into(),
        ));
    }
    let delta = lateral_sign(zeta);
    let gamma = longitudinal_sign(zeta);
    let (sin, cos) = heading.sin_cos();
    Ok(0.5 * Point::new(
        -sin * delta * width + cos * gamma * length,
        cos * delta * width + sin * gamma * length,
    ))
}

/// Positions of all four vertices of the rectangle described by a filter
/// state mean, keyed in the order FL, FR, BL, BR.
pub fn rectangle_corners(state: &StateVec) -> [(ReferencePoint, Point); 4] {
    let center = Point::new(state[0], state[1]);
    CORNERS.map(|zeta| {
        let off = corner_offset(zeta, state[2], state[6], state[7])
            .expect("CORNERS contains vertices only");
        (zeta, center + off)
    })
}

/// The three vertices of the track rectangle closest to the sensor, by
/// ascending Euclidean distance; ties broken in the order FL, FR, BL, BR.
pub fn candidate_reference_points(sensor_pos: Point, state: &StateVec) -> [ReferencePoint; 3] {
    let mut ranked: Vec<(f64, usize, ReferencePoint)> = rectangle_corners(state)
        .iter()
        .enumerate()
        .map(|(i, (zeta, p))| ((p - sensor_pos).norm_squared(), i, *zeta))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    [ranked[0].2, ranked[1].2, ranked[2].2]
}

/// Sensor field of view: a simple polygon in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CoveredArea {
    vertices: Vec<Point>,
}

impl CoveredArea {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let vertices: Vec<Point> = vertices.iter().map(|v| Point::new(v[0], v[1])).collect();
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "covered area needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let area = CoveredArea { vertices };
        if area.signed_area().abs() < 1e-12 {
            return Err(Error::Geometry("covered area polygon has zero area".into()));
        }
        if !area.is_simple() {
            return Err(Error::Geometry("covered area polygon self-intersects".into()));
        }
        Ok(area)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn as_vertex_arrays(&self) -> Vec<[f64; 2]> {
        self.vertices.iter().map(|p| [p.x, p.y]).collect()
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    fn signed_area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|(a, b)| a.x * b.y - b.x * a.y)
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = (self.vertices[i], self.vertices[(i + 1) % n]);
            if (a.1 - a.0).norm_squared() < 1e-24 {
                return false; // repeated vertex
            }
            for j in (i + 1)..n {
                // Adjacent edges share an endpoint; skip those pairs.
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let b = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a.0, a.1, b.0, b.1) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd containment test; points on the boundary may land on either
    /// side, which is irrelevant because their distance is zero.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Minimal distance from `p` to the polygonal boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed minimal distance between a point and the polygonal line:
    /// negative inside the covered area, positive outside, zero on the
    /// boundary.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let d = self.boundary_distance(p);
        if self.contains(p) {
            -d
        } else {
            d
        }
    }
}

/// Distance from a point to the closed segment `[a, b]`.
fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a1: Point, a2: Point, b1: Point, b2: Point) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, b2, a1))
        || (d2 == 0.0 && on_segment(b1, b2, a2))
        || (d3 == 0.0 && on_segment(a1, a2, b1))
        || (d4 == 0.0 && on_segment(a1, a2, b2))
}
