//! Unit quaternions acting on ℝ³ by `p ↦ q p q⁻¹`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Quaternion stored scalar-first as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about the unit `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }


    /// Row-major rotation matrix `R` with `R p = q p q⁻¹` for unit `q`.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.to_matrix();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.w.abs().min(1.0).acos()
    }
}

/// Haar-uniform rotation via Shoemake's subgroup algorithm.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let tau = std::f64::consts::TAU;
    let (s2, c2) = (tau * u2).sin_cos();
    let (s3, c3) = (tau * u3).sin_cos();
    Quaternion::new(b * c3, a * s2, a * c2, b * s3).normalized()
}

impl std::ops::Neg for Quaternion {
    type Output = Self;

    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Hamilton product.
impl std::ops::Mul for Quaternion {
    type Output = Self;

    fn mul(self, r: Self) -> Self {
        let l = self;
        Self::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn matrix_matches_sandwich_product() {
        let mut rng = stream(5, Purpose::Diagnostics, 0, 0);
        for _ in 0..20 {
            let q = sample_rotation(&mut rng);
            let p = [0.3, -1.2, 2.5];
            let pq = Quaternion::new(0.0, p[0], p[1], p[2]);
            let s = q * pq * q.conjugate();
            let r = q.rotate(p);
            assert!((s.x - r[0]).abs() < 1e-12);
            assert!((s.y - r[1]).abs() < 1e-12);
            assert!((s.z - r[2]).abs() < 1e-12);
            assert!(s.w.abs() < 1e-12);
        }
    }

    #[test]
    fn unit_norm_and_determinism() {
        let a: Vec<Quaternion> = {
            let mut rng = stream(11, Purpose::Diagnostics, 0, 0);
            (0..100).map(|_| sample_rotation(&mut rng)).collect()
        };
        let b: Vec<Quaternion> = {
            let mut rng = stream(11, Purpose::Diagnostics, 0, 0);
            (0..100).map(|_| sample_rotation(&mut rng)).collect()
        };
        assert_eq!(a, b);
        for q in a {
            assert!((q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_angle_about_z() {
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let r = q.rotate([1.0, 0.0, 0.0]);
        assert!((r[0]).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert!((q.angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
