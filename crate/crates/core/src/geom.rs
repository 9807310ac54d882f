//! Small linear-algebra types shared by every module.
//!
//! World frame is right-handed with `+z` pointing up. All quantities are
//! double precision.

use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction; the zero vector maps to itself.
    pub fn normalize(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Vec3 {
        Vec3::new(self.x.clamp(lo, hi), self.y.clamp(lo, hi), self.z.clamp(lo, hi))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation about the world `z` axis by `deg` degrees (counter-clockwise
    /// seen from `+z`).
    pub fn rotate_z_deg(self, deg: f64) -> Vec3 {
        let (s, c) = sin_cos_deg(deg);
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Vec3 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

/// 4x4 matrix stored column-major: element `(row, col)` lives at
/// `m[col * 4 + row]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4 {
    pub m: [f64; 16],
}

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4 {
        m: [
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    };

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[col * 4 + row]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.m[col * 4 + row] = v;
    }

    /// Rigid transform from rotation rows and translation column.
    pub fn from_rows_translation(rows: [Vec3; 3], t: Vec3) -> Mat4 {
        let mut out = Mat4::IDENTITY;
        for (r, row) in rows.iter().enumerate() {
            for c in 0..3 {
                out.set(r, c, row[c]);
            }
            out.set(r, 3, t[r]);
        }
        out
    }

    pub fn mul_mat(&self, o: &Mat4) -> Mat4 {
        let mut out = Mat4 { m: [0.0; 16] };
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.get(r, k) * o.get(k, c);
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            self.get(0, 0) * p.x + self.get(0, 1) * p.y + self.get(0, 2) * p.z + self.get(0, 3),
            self.get(1, 0) * p.x + self.get(1, 1) * p.y + self.get(1, 2) * p.z + self.get(1, 3),
            self.get(2, 0) * p.x + self.get(2, 1) * p.y + self.get(2, 2) * p.z + self.get(2, 3),
        )
    }

    pub fn transform_vector(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.get(0, 0) * v.x + self.get(0, 1) * v.y + self.get(0, 2) * v.z,
            self.get(1, 0) * v.x + self.get(1, 1) * v.y + self.get(1, 2) * v.z,
            self.get(2, 0) * v.x + self.get(2, 1) * v.y + self.get(2, 2) * v.z,
        )
    }

    /// Inverse of a rigid transform (orthonormal rotation block).
    pub fn rigid_inverse(&self) -> Mat4 {
        let mut out = Mat4::IDENTITY;
        for r in 0..3 {
            for c in 0..3 {
                out.set(r, c, self.get(c, r));
            }
        }
        let t = Vec3::new(self.get(0, 3), self.get(1, 3), self.get(2, 3));
        let ti = -out.transform_vector(t);
        for r in 0..3 {
            out.set(r, 3, ti[r]);
        }
        out
    }

    /// `max |RᵀR − I|` over the upper-left 3x3 block.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += self.get(k, i) * self.get(k, j);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

/// Half-line with unit direction, clipped to `[t_near, t_far]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// A clipped ray with `t_near == t_far == 0` carries no segment.
    pub fn is_miss(&self) -> bool {
        !(self.t_far > self.t_near)
    }
}

/// Slab intersection of a ray against the axis-aligned box `[lo, hi]`.
/// Returns `(t_near, t_far)` with `t_near >= 0`, or `None` on a miss.
pub fn intersect_aabb(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = origin[a];
        let d = dir[a];
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut ta = (lo[a] - o) * inv;
        let mut tb = (hi[a] - o) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Scene bounds shared by rendering, sampling and extraction.
pub const SCENE_MIN: Vec3 = Vec3::splat(-1.0);
pub const SCENE_MAX: Vec3 = Vec3::splat(1.0);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_right_handed() {
        assert_eq!(Vec3::X.cross(Vec3::Y), Vec3::Z);
        assert_eq!(Vec3::Y.cross(Vec3::Z), Vec3::X);
    }

    #[test]
    fn sin_cos_exact_at_right_angles() {
        assert_eq!(sin_cos_deg(90.0), (1.0, 0.0));
        assert_eq!(sin_cos_deg(-90.0), (-1.0, 0.0));
        assert_eq!(sin_cos_deg(720.0), (0.0, 1.0));
    }

    #[test]
    fn rigid_inverse_roundtrip() {
        let rows = [
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 0.0),
        ];
        let m = Mat4::from_rows_translation(rows, Vec3::new(1.0, -2.0, 3.0));
        let p = Vec3::new(0.3, 0.4, -0.7);
        let q = m.rigid_inverse().transform_point(m.transform_point(p));
        assert!((q - p).norm() < 1e-15);
        assert!(m.orthonormality_error() < 1e-15);
        let id = m.mul_mat(&m.rigid_inverse());
        for i in 0..16 {
            assert!((id.m[i] - Mat4::IDENTITY.m[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn aabb_axis_hit_and_miss() {
        let hit = intersect_aabb(Vec3::new(2.0, 0.0, 0.0), -Vec3::X, SCENE_MIN, SCENE_MAX);
        assert_eq!(hit, Some((1.0, 3.0)));
        let miss = intersect_aabb(Vec3::new(2.0, 0.0, 0.0), Vec3::Y, SCENE_MIN, SCENE_MAX);
        assert_eq!(miss, None);
        // Origin inside the box starts at t = 0.
        let inside = intersect_aabb(Vec3::ZERO, Vec3::Z, SCENE_MIN, SCENE_MAX);
        assert_eq!(inside, Some((0.0, 1.0)));
    }
}
