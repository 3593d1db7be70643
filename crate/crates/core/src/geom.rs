//! Small fixed-size vector and matrix types generic over [`Real`].
//!
//! nalgebra is used where only `f64` is involved; the engine needs the same
//! arithmetic on tape scalars, which these types provide without trait
//! gymnastics.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3<R> {
    pub x: R,
    pub y: R,
    pub z: R,
}

impl<R: Real> Vec3<R> {
    #[inline(always)]
    pub fn new(x: R, y: R, z: R) -> Self {
        Vec3 { x, y, z }
    }

    #[inline(always)]
    pub fn zeros() -> Self {
        Vec3::new(R::zero(), R::zero(), R::zero())
    }

    #[inline(always)]
    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3::new(R::from_f64(v[0]), R::from_f64(v[1]), R::from_f64(v[2]))
    }

    #[inline(always)]
    pub fn value(&self) -> [f64; 3] {
        [self.x.value(), self.y.value(), self.z.value()]
    }

    #[inline(always)]
    pub fn dot(&self, o: &Self) -> R {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline(always)]
    pub fn cross(&self, o: &Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline(always)]
    pub fn norm_squared(&self) -> R {
        self.dot(self)
    }

    #[inline(always)]
    pub fn norm(&self) -> R {
        self.norm_squared().sqrt()
    }

    #[inline(always)]
    pub fn scale(&self, s: R) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn map<S>(&self, f: impl Fn(R) -> S) -> Vec3<S> {
        Vec3 {
            x: f(self.x),
            y: f(self.y),
            z: f(self.z),
        }
    }
}

impl Vec3<f64> {
    pub const ZERO: Vec3<f64> = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl<R: Real> Add for Vec3<R> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<R: Real> AddAssign for Vec3<R> {
    #[inline(always)]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<R: Real> Sub for Vec3<R> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<R: Real> SubAssign for Vec3<R> {
    #[inline(always)]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl<R: Real> Neg for Vec3<R> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl<R: Real> Mul<R> for Vec3<R> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, s: R) -> Self {
        self.scale(s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3<R> {
    pub m: [[R; 3]; 3],
}

impl<R: Real> Mat3<R> {
    pub fn identity() -> Self {
        let (o, z) = (R::one(), R::zero());
        Mat3 {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn zeros() -> Self {
        Mat3 {
            m: [[R::zero(); 3]; 3],
        }
    }

    pub fn from_f64(a: [[f64; 3]; 3]) -> Self {
        Mat3 {
            m: a.map(|row| row.map(R::from_f64)),
        }
    }

    pub fn value(&self) -> [[f64; 3]; 3] {
        self.m.map(|row| row.map(|v| v.value()))
    }

    pub fn diag(d: [R; 3]) -> Self {
        let mut out = Self::zeros();
        for (i, v) in d.into_iter().enumerate() {
            out.m[i][i] = v;
        }
        out
    }

    /// `[v]×`, the matrix with `[v]× a = v × a`.
    pub fn skew(v: &Vec3<R>) -> Self {
        let z = R::zero();
        Mat3 {
            m: [[z, -v.z, v.y], [v.z, z, -v.x], [-v.y, v.x, z]],
        }
    }

    #[inline(always)]
    pub fn col(&self, j: usize) -> Vec3<R> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn from_cols(c0: Vec3<R>, c1: Vec3<R>, c2: Vec3<R>) -> Self {
        Mat3 {
            m: [[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]],
        }
    }

    #[inline(always)]
    pub fn mul_vec(&self, v: &Vec3<R>) -> Vec3<R> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// `Mᵀ v`.
    #[inline(always)]
    pub fn tr_mul_vec(&self, v: &Vec3<R>) -> Vec3<R> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = self.m[j][i];
            }
        }
        out
    }

    pub fn add_scaled(&self, o: &Self, s: R) -> Self {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = self.m[i][j] + o.m[i][j] * s;
            }
        }
        out
    }

    pub fn trace(&self) -> R {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> R {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse by cofactors; `None` when the determinant is numerically zero.
    pub fn inverse(&self) -> Option<Self> {
        let m = &self.m;
        let det = self.determinant();
        let scale = self.m.iter().flatten().fold(0.0f64, |a, v| a.max(v.value().abs()));
        if det.value().abs() <= 1e-14 * scale.powi(3) || !det.is_finite() {
            return None;
        }
        let inv_det = R::one() / det;
        let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d];
        let out = [
            [
                c(1, 1, 2, 2) - c(1, 2, 2, 1),
                c(0, 2, 2, 1) - c(0, 1, 2, 2),
                c(0, 1, 1, 2) - c(0, 2, 1, 1),
            ],
            [
                c(1, 2, 2, 0) - c(1, 0, 2, 2),
                c(0, 0, 2, 2) - c(0, 2, 2, 0),
                c(0, 2, 1, 0) - c(0, 0, 1, 2),
            ],
            [
                c(1, 0, 2, 1) - c(1, 1, 2, 0),
                c(0, 1, 2, 0) - c(0, 0, 2, 1),
                c(0, 0, 1, 1) - c(0, 1, 1, 0),
            ],
        ];
        Some(Mat3 {
            m: out.map(|row| row.map(|v| v * inv_det)),
        })
    }

    /// Gram–Schmidt re-orthonormalisation of the columns, third column
    /// rebuilt as the cross product so the result is a proper rotation.
    pub fn orthonormalized(&self) -> Self {
        let c0 = self.col(0);
        let e0 = c0.scale(R::one() / c0.norm());
        let c1 = self.col(1);
        let c1 = c1 - e0.scale(e0.dot(&c1));
        let e1 = c1.scale(R::one() / c1.norm());
        let e2 = e0.cross(&e1);
        Mat3::from_cols(e0, e1, e2)
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

impl<R: Real> Add for Mat3<R> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        let mut m = self.m;
        for (row, orow) in m.iter_mut().zip(o.m) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        Mat3 { m }
    }
}

impl Mat3<f64> {
    /// Rotation about a unit axis by `angle` (Rodrigues).
    pub fn axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let k = Vec3::new(axis[0] / n, axis[1] / n, axis[2] / n);
        let kx = Mat3::skew(&k);
        let kx2 = kx.mul_mat(&kx);
        Mat3::identity()
            .add_scaled(&kx, angle.sin())
            .add_scaled(&kx2, 1.0 - angle.cos())
    }

    /// Rotation from the exponential map of a rotation vector.
    pub fn exp_map(w: [f64; 3]) -> Self {
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if theta < 1e-300 {
            return Mat3::identity();
        }
        Self::axis_angle(w, theta)
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::axis_angle([0.0, 0.0, 1.0], yaw)
    }

    /// Z-Y-X Euler angles (roll, pitch, yaw).
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::from_yaw(yaw)
            .mul_mat(&Self::axis_angle([0.0, 1.0, 0.0], pitch))
            .mul_mat(&Self::axis_angle([1.0, 0.0, 0.0], roll))
    }

    /// (roll, pitch, yaw) for a rotation built as in [`Mat3::from_rpy`].
    pub fn to_rpy(&self) -> [f64; 3] {
        let m = &self.m;
        let pitch = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let roll = m[2][1].atan2(m[2][2]);
        let yaw = m[1][0].atan2(m[0][0]);
        [roll, pitch, yaw]
    }

    /// Unit quaternion `[w, x, y, z]`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.m;
        let tr = self.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
        };
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = q.map(|v| v / n);
        if q[0] < 0.0 {
            q.map(|v| -v)
        } else {
            q
        }
    }

    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        Mat3 {
            m: [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ],
        }
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.transpose().mul_mat(self);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = rtr.m[i][j] - if i == j { 1.0 } else { 0.0 };
                acc += e * e;
            }
        }
        acc.sqrt()
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let c = (self.transpose().mul_mat(other).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }
}
