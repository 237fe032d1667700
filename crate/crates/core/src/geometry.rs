//! Planar geometry: oriented boxes, simple polygons, angle helpers.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Oriented rectangle centered at `center` with its length along `heading`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    fn axes(&self) -> (Point, Point) {
        let (s, c) = self.heading.sin_cos();
        ([c, s], [-s, c])
    }

    /// Corners in counterclockwise order starting front-left.
    pub fn corners(&self) -> [Point; 4] {
        let (f, l) = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let [cx, cy] = self.center;
        let at = |a: f64, b: f64| [cx + f[0] * a + l[0] * b, cy + f[1] * a + l[1] * b];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Closed containment test (boundary counts as inside).
    pub fn contains(&self, p: Point) -> bool {
        let (f, l) = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let a = d[0] * f[0] + d[1] * f[1];
        let b = d[0] * l[0] + d[1] * l[1];
        a.abs() <= self.length / 2.0 && b.abs() <= self.width / 2.0
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let (a1, a2) = self.axes();
        let (b1, b2) = other.axes();
        let d = [
            other.center[0] - self.center[0],
            other.center[1] - self.center[1],
        ];
        let dot = |u: Point, v: Point| u[0] * v[0] + u[1] * v[1];
        for axis in [a1, a2, b1, b2] {
            let ra =
                self.length / 2.0 * dot(a1, axis).abs() + self.width / 2.0 * dot(a2, axis).abs();
            let rb =
                other.length / 2.0 * dot(b1, axis).abs() + other.width / 2.0 * dot(b2, axis).abs();
            if dot(d, axis).abs() > ra + rb {
                return false;
            }
        }
        true
    }

    pub fn translated(&self, by: Point) -> Self {
        Self {
            center: [self.center[0] + by[0], self.center[1] + by[1]],
            ..*self
        }
    }
}

/// Simple polygon with counterclockwise vertices (closing edge implied).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on_seg = |a: Point, b: Point, p: Point| {
        p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    (d1 == 0.0 && on_seg(q1, q2, p1))
        || (d2 == 0.0 && on_seg(q1, q2, p2))
        || (d3 == 0.0 && on_seg(p1, p2, q1))
        || (d4 == 0.0 && on_seg(p1, p2, q2))
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    /// Shoelace area, positive for counterclockwise order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            / 2.0
    }

    /// At least three vertices and no two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let edge = |i: usize| (self.vertices[i], self.vertices[(i + 1) % n]);
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a, b) = edge(i);
                let (c, d) = edge(j);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_ccw(&self) -> bool {
        self.signed_area() > 0.0
    }

    /// Even-odd point test.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
                if p[0] < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn translated(&self, by: Point) -> Self {
        Self::new(
            self.vertices
                .iter()
                .map(|v| [v[0] + by[0], v[1] + by[1]])
                .collect(),
        )
    }

    /// Applies `p -> R(theta) p + t`.
    pub fn transformed(&self, theta: f64, t: Point) -> Self {
        Self::new(self.vertices.iter().map(|&v| rigid(v, theta, t)).collect())
    }
}

pub fn rigid(p: Point, theta: f64, t: Point) -> Point {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]]
}

/// Expresses world point `p` in a frame with origin `origin` and yaw `theta`.
pub fn to_local(p: Point, origin: Point, theta: f64) -> Point {
    let (s, c) = theta.sin_cos();
    let d = [p[0] - origin[0], p[1] - origin[1]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

/// Point inside at least one polygon.
pub fn in_any(polys: &[Polygon], p: Point) -> bool {
    polys.iter().any(|poly| poly.contains(p))
}

/// Polyline through `points`, offset to either side by `half_width`, joined
/// into one counterclockwise polygon (right side forward, left side back).
pub fn corridor(points: &[Point], half_width: f64) -> Polygon {
    let n = points.len();
    let mut right = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    for i in 0..n {
        let a = points[i.saturating_sub(1)];
        let b = points[(i + 1).min(n - 1)];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt();
        let nrm = [-dy / len, dx / len];
        let p = points[i];
        left.push([p[0] + nrm[0] * half_width, p[1] + nrm[1] * half_width]);
        right.push([p[0] - nrm[0] * half_width, p[1] - nrm[1] * half_width]);
    }
    left.reverse();
    right.extend(left);
    Polygon::new(right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn obb_contains_and_corners() {
        let b = Obb::new([1.0, 2.0], FRAC_PI_2, 4.0, 2.0);
        assert!(b.contains([1.0, 3.9]));
        assert!(!b.contains([2.5, 2.0]));
        for c in b.corners() {
            assert!(b.contains([c[0] * (1.0 - 1e-12), c[1] * (1.0 - 1e-12)]) || b.contains(c));
        }
    }

    #[test]
    fn sat_overlap_cases() {
        let a = Obb::new([0.0, 0.0], 0.0, 4.0, 2.0);
        assert!(a.overlaps(&Obb::new([3.5, 0.0], 0.0, 4.0, 2.0)));
        assert!(!a.overlaps(&Obb::new([4.5, 0.0], 0.0, 4.0, 2.0)));
        // diagonal box whose AABB would overlap but the boxes do not
        let d = Obb::new([2.9, 2.4], FRAC_PI_4, 2.0, 0.5);
        assert!(!a.overlaps(&d));
        assert!(a.overlaps(&Obb::new([2.0, 1.0], FRAC_PI_4, 2.0, 0.5)));
    }

    #[test]
    fn polygon_simple_and_orientation() {
        let r = Polygon::rect(0.0, 0.0, 2.0, 1.0);
        assert!(r.is_simple() && r.is_ccw());
        assert!(r.contains([1.0, 0.5]) && !r.contains([3.0, 0.5]));
        let bowtie = Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(!bowtie.is_simple());
    }

    #[test]
    fn corridor_is_simple_ccw() {
        let pts: Vec<Point> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.08;
                [10.0 * a.sin(), 10.0 * (1.0 - a.cos())]
            })
            .collect();
        let c = corridor(&pts, 2.5);
        assert!(c.is_simple());
        assert!(c.is_ccw());
        assert!(c.contains(pts[5]));
    }

    #[test]
    fn local_frame_round_trip() {
        let p = [3.0, -1.0];
        let o = [1.0, 2.0];
        let l = to_local(p, o, 0.7);
        let back = rigid(l, 0.7, o);
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }
}
