//! Small planar geometry kit: vectors, oriented boxes, ray casts.

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
        Vec2 { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Vec2 { x: c, y: s }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    /// Counter-clockwise perpendicular (left-hand normal for a forward tangent).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
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

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// Rectangle with arbitrary orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    /// Unit vector of the first (length) axis.
    pub axis: Vec2,
    /// Half extents along `axis` and its perpendicular.
    pub half: Vec2,
}

impl OrientedBox {
    pub fn new(center: Vec2, heading: f64, half_length: f64, half_width: f64) -> Self {
        OrientedBox {
            center,
            axis: Vec2::from_angle(heading),
            half: Vec2::new(half_length, half_width),
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let u = self.axis * self.half.x;
        let v = self.axis.perp() * self.half.y;
        [
            self.center + u + v,
            self.center - u + v,
            self.center - u - v,
            self.center + u - v,
        ]
    }

    fn project_radius(&self, dir: Vec2) -> f64 {
        self.half.x * self.axis.dot(dir).abs() + self.half.y * self.axis.perp().dot(dir).abs()
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let d = other.center - self.center;
        for axis in [self.axis, self.axis.perp(), other.axis, other.axis.perp()] {
            let dist = d.dot(axis).abs();
            if dist > self.project_radius(axis) + other.project_radius(axis) {
                return false;
            }
        }
        true
    }
}

/// Distance along a unit-direction ray to segment `[a, b]`, if hit.
pub fn ray_segment(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-14 {
        return None;
    }
    let w = a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
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
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) + PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ray_hits_perpendicular_segment() {
        let t = ray_segment(
            Vec2::ZERO,
            Vec2::new(0.0, 1.0),
            Vec2::new(-5.0, 6.0),
            Vec2::new(5.0, 6.0),
        );
        assert_eq!(t, Some(6.0));
        let miss = ray_segment(
            Vec2::ZERO,
            Vec2::new(0.0, -1.0),
            Vec2::new(-5.0, 6.0),
            Vec2::new(5.0, 6.0),
        );
        assert_eq!(miss, None);
    }

    #[test]
    fn box_overlap() {
        let a = OrientedBox::new(Vec2::ZERO, 0.0, 2.0, 1.0);
        let b = OrientedBox::new(Vec2::new(3.9, 0.0), 0.0, 2.0, 1.0);
        let c = OrientedBox::new(Vec2::new(4.1, 0.0), 0.0, 2.0, 1.0);
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        // rotated 45 degrees, corner just short of touching
        let d = OrientedBox::new(Vec2::new(2.0 + 1.0 * 2f64.sqrt() + 0.01, 0.0), std::f64::consts::FRAC_PI_4, 1.0, 1.0);
        assert!(!a.overlaps(&d));
    }
}
