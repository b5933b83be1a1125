//! Planar geometry primitives shared by dynamics, collision, rendering and raycasting.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut t = theta % two_pi;
    if t <= -PI {
        t += two_pi;
    } else if t > PI {
        t -= two_pi;
    }
    t
}

/// Oriented rectangle. `half_length` runs along `heading`, `half_width` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_length: length * 0.5,
            half_width: width * 0.5,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let fwd = Vec2::from_angle(self.heading);
        (fwd, fwd.perp())
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (f, l) = self.axes();
        let a = f * self.half_length;
        let b = l * self.half_width;
        let c = self.center;
        [c + a + b, c - a + b, c - a - b, c + a - b]
    }

    /// Local (longitudinal, lateral) coordinates of a world point.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let (f, l) = self.axes();
        let d = p - self.center;
        Vec2::new(d.dot(f), d.dot(l))
    }

    /// Strict interior test.
    pub fn contains_strict(&self, p: Vec2) -> bool {
        let q = self.to_local(p);
        q.x.abs() < self.half_length && q.y.abs() < self.half_width
    }

    /// Closed test, used by the rasterizer (pixel centers on an edge are painted).
    pub fn contains(&self, p: Vec2) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= self.half_length && q.y.abs() <= self.half_width
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    pub fn edges(&self) -> [(Vec2, Vec2); 4] {
        let c = self.corners();
        [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
    }

    pub fn grown(&self, margin: f64) -> Obb {
        Obb {
            half_length: self.half_length + margin,
            half_width: self.half_width + margin,
            ..*self
        }
    }
}

/// Distance from `p` to segment `a`–`b`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Distance from `p` to an open polyline, and the arc length of the projection.
pub fn project_onto_polyline(p: Vec2, pts: &[Vec2]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = b - a;
        let len = ab.norm();
        let t = if len > 0.0 {
            ((p - a).dot(ab) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = p.distance(a + ab * t);
        if d < best.0 {
            best = (d, acc + t * len);
        }
        acc += len;
    }
    best
}

pub fn polyline_length(pts: &[Vec2]) -> f64 {
    pts.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Point at arc length `s` along a polyline, clamped to its ends, with the local tangent angle.
pub fn point_along_polyline(pts: &[Vec2], s: f64) -> (Vec2, f64) {
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if remaining <= len && len > 0.0 {
            return (w[0] + seg * (remaining / len), seg.y.atan2(seg.x));
        }
        remaining -= len;
    }
    let n = pts.len();
    let seg = pts[n - 1] - pts[n - 2];
    (pts[n - 1], seg.y.atan2(seg.x))
}

/// Ray–segment intersection. Returns the ray parameter `t ≥ 0` (distance for unit `dir`).
pub fn ray_segment(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom == 0.0 {
        return None;
    }
    let ao = a - origin;
    let t = ao.cross(e) / denom;
    let u = ao.cross(dir) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(2.0 * PI + 0.1) - 0.1).abs() < 1e-12);
        for k in -50..50 {
            let w = wrap_angle(k as f64 * 0.77);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn ray_hits_segment_ahead() {
        let t = ray_segment(
            Vec2::ZERO,
            Vec2::new(1.0, 0.0),
            Vec2::new(5.0, -1.0),
            Vec2::new(5.0, 1.0),
        );
        assert_eq!(t, Some(5.0));
        let behind = ray_segment(
            Vec2::ZERO,
            Vec2::new(1.0, 0.0),
            Vec2::new(-5.0, -1.0),
            Vec2::new(-5.0, 1.0),
        );
        assert_eq!(behind, None);
    }

    #[test]
    fn polyline_projection() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)];
        let (d, s) = project_onto_polyline(Vec2::new(4.0, 2.0), &pts);
        assert!((d - 2.0).abs() < 1e-12 && (s - 4.0).abs() < 1e-12);
        let (d, s) = project_onto_polyline(Vec2::new(12.0, 5.0), &pts);
        assert!((d - 2.0).abs() < 1e-12 && (s - 15.0).abs() < 1e-12);
        assert_eq!(polyline_length(&pts), 20.0);
    }
}
