//! Small planar geometry helpers shared across the stack.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Wraps an angle into the half-open interval `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn sub(&self, other: &Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(&self, other: &Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(&self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    /// Rotates the point counter-clockwise about the origin.
    pub fn rotate(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Closed polygon given by its vertices in order. Points on the boundary are
/// considered inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn rect(min: Point2, max: Point2) -> Self {
        Self::new(vec![
            min,
            Point2::new(max.x, min.y),
            max,
            Point2::new(min.x, max.y),
        ])
    }

    pub fn contains(&self, p: &Point2) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if on_segment(p, &a, &b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn translated(&self, d: Point2) -> Self {
        Self::new(self.vertices.iter().map(|v| v.add(&d)).collect())
    }
}

fn on_segment(p: &Point2, a: &Point2, b: &Point2) -> bool {
    let ab = b.sub(a);
    let ap = p.sub(a);
    let cross = ab.x * ap.y - ab.y * ap.x;
    let len = ab.norm().max(1e-12);
    if (cross / len).abs() > 1e-12 {
        return false;
    }
    let t = ap.dot(&ab) / (len * len);
    (-1e-12..=1.0 + 1e-12).contains(&t)
}

/// Axis-aligned bounding rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(&self, p: &Point2) -> Point2 {
        Point2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }
}

/// Closest point on segment `a -> b` to `p`, and its parameter in `[0, 1]`.
pub fn project_on_segment(p: &Point2, a: &Point2, b: &Point2) -> (Point2, f64) {
    let ab = b.sub(a);
    let len2 = ab.dot(&ab);
    if len2 <= f64::EPSILON {
        return (*a, 0.0);
    }
    let t = (p.sub(a).dot(&ab) / len2).clamp(0.0, 1.0);
    (a.add(&ab.scale(t)), t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
        assert!(wrap_angle(-1e-18) < PI);
    }

    #[test]
    fn polygon_boundary_is_inside() {
        let sq = Polygon::rect(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0));
        assert!(sq.contains(&Point2::new(0.5, 0.5)));
        assert!(sq.contains(&Point2::new(1.0, 0.5)));
        assert!(sq.contains(&Point2::new(0.0, 0.0)));
        assert!(!sq.contains(&Point2::new(1.0001, 0.5)));
    }
}
