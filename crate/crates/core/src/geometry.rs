//! Plan-view geometry: 2D vectors and 2.5D oriented boxes (footprint + height).

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
        Self::new(theta.cos(), theta.sin())
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

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
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

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = theta.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Oriented rectangle footprint extruded to a height: the 2.5D box used for
/// every road user, parked vehicle and structural element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vec2,
    pub yaw: f64,
    /// Half length along the heading, half width across it.
    pub half_extents: Vec2,
    pub height: f64,
}

impl Obb {
    pub fn new(center: Vec2, yaw: f64, length: f64, width: f64, height: f64) -> Self {
        Self {
            center,
            yaw,
            half_extents: Vec2::new(length / 2.0, width / 2.0),
            height,
        }
    }

    pub fn axes(&self) -> (Vec2, Vec2) {
        let u = Vec2::from_angle(self.yaw);
        (u, u.perp())
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let a = u * self.half_extents.x;
        let b = v * self.half_extents.y;
        let c = self.center;
        [c + a + b, c - a + b, c - a - b, c + a - b]
    }

    /// Map a world point into the box frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let (u, v) = self.axes();
        let d = p - self.center;
        Vec2::new(d.dot(u), d.dot(v))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_extents.x && l.y.abs() <= self.half_extents.y
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    /// Closed separating-axis test: boxes that only touch count as overlapping.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = other.center - self.center;
        if d.norm() > self.bounding_radius() + other.bounding_radius() + 1e-9 {
            return false;
        }
        let (a0, a1) = self.axes();
        let (b0, b1) = other.axes();
        for axis in [a0, a1, b0, b1] {
            let ra = self.projected_radius(axis);
            let rb = other.projected_radius(axis);
            // Tolerance absorbs rounding on exactly touching edges.
            if d.dot(axis).abs() > ra + rb + 1e-9 {
                return false;
            }
        }
        true
    }

    fn projected_radius(&self, axis: Vec2) -> f64 {
        let (u, v) = self.axes();
        self.half_extents.x * u.dot(axis).abs() + self.half_extents.y * v.dot(axis).abs()
    }

    /// Parameter interval `[t0, t1]` within `[0, 1]` for which the segment
    /// `a + t (b - a)` lies inside the footprint, if any.
    pub fn clip_segment(&self, a: Vec2, b: Vec2) -> Option<(f64, f64)> {
        let la = self.to_local(a);
        let lb = self.to_local(b);
        let d = lb - la;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, dp, h) in [
            (la.x, d.x, self.half_extents.x),
            (la.y, d.y, self.half_extents.y),
        ] {
            if dp.abs() < 1e-15 {
                if p.abs() > h {
                    return None;
                }
                continue;
            }
            let mut ta = (-h - p) / dp;
            let mut tb = (h - p) / dp;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Distance from the point to the footprint (zero inside).
    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        let l = self.to_local(p);
        let dx = (l.x.abs() - self.half_extents.x).max(0.0);
        let dy = (l.y.abs() - self.half_extents.y).max(0.0);
        dx.hypot(dy)
    }

    /// Axis-aligned bounds `(min, max)` of the footprint.
    pub fn aabb(&self) -> (Vec2, Vec2) {
        let (u, v) = self.axes();
        let ex = self.half_extents.x * u.x.abs() + self.half_extents.y * v.x.abs();
        let ey = self.half_extents.x * u.y.abs() + self.half_extents.y * v.y.abs();
        (
            Vec2::new(self.center.x - ex, self.center.y - ey),
            Vec2::new(self.center.x + ex, self.center.y + ey),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(x: f64, y: f64, yaw: f64, l: f64, w: f64) -> Obb {
        Obb::new(Vec2::new(x, y), yaw, l, w, 1.0)
    }

    #[test]
    fn disjoint_and_identical() {
        let a = boxed(0.0, 0.0, 0.3, 4.6, 1.9);
        assert!(!a.overlaps(&boxed(10.0, 0.0, 0.0, 4.6, 1.9)));
        assert!(a.overlaps(&a));
    }

    #[test]
    fn touching_edges_overlap() {
        let a = boxed(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = boxed(2.0, 0.0, 0.0, 2.0, 2.0);
        assert!(a.overlaps(&b));
        assert!(b.overlaps(&a));
        let c = boxed(2.0 + 1e-6, 0.0, 0.0, 2.0, 2.0);
        assert!(!a.overlaps(&c));
    }

    // Polygon intersection by point sampling: a point inside both boxes, or an
    // edge of one crossing an edge of the other.
    fn sampled_overlap(a: &Obb, b: &Obb) -> bool {
        let edges = |o: &Obb| {
            let c = o.corners();
            [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
        };
        for (p0, p1) in edges(a) {
            for k in 0..=200 {
                let p = p0 + (p1 - p0) * (k as f64 / 200.0);
                if b.contains(p) {
                    return true;
                }
            }
        }
        for (p0, p1) in edges(b) {
            for k in 0..=200 {
                let p = p0 + (p1 - p0) * (k as f64 / 200.0);
                if a.contains(p) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn sat_agrees_with_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let a = boxed(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.2..3.2),
                rng.random_range(0.3..5.0),
                rng.random_range(0.3..3.0),
            );
            let b = boxed(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.2..3.2),
                rng.random_range(0.3..5.0),
                rng.random_range(0.3..3.0),
            );
            let sat = a.overlaps(&b);
            assert_eq!(sat, b.overlaps(&a));
            if sat != sampled_overlap(&a, &b) {
                // Sampling can miss a sliver thinner than its step; accept only
                // those near-boundary cases.
                let shrunk = Obb {
                    half_extents: a.half_extents * 0.98,
                    ..a
                };
                let grown = Obb {
                    half_extents: a.half_extents * 1.02,
                    ..a
                };
                if shrunk.overlaps(&b) || !grown.overlaps(&b) {
                    disagreements += 1;
                }
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn clip_segment_through_box() {
        let o = boxed(5.0, 0.0, 0.0, 2.0, 2.0);
        let (t0, t1) = o
            .clip_segment(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0))
            .unwrap();
        assert!((t0 - 0.4).abs() < 1e-12 && (t1 - 0.6).abs() < 1e-12);
        assert!(o
            .clip_segment(Vec2::new(0.0, 2.0), Vec2::new(10.0, 2.0))
            .is_none());
    }

    #[test]
    fn angles_wrap() {
        use std::f64::consts::PI;
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5) - 0.5).abs() < 1e-12);
    }
}
