//! Small fixed-size vector, matrix and quaternion types.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]))
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    /// Unit vector in the same direction. Zero input yields NaNs.
    #[inline]
    pub fn normalize(self) -> Self {
        self * (T::one() / self.norm())
    }

    #[inline]
    pub fn hadamard(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn zero() -> Self {
        Self {
            m: [[T::zero(); 3]; 3],
        }
    }

    pub fn from_cols(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Self {
            m: [[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]],
        }
    }

    pub fn from_diag(d: Vec3<T>) -> Self {
        let z = T::zero();
        Self {
            m: [[d.x, z, z], [z, d.y, z], [z, z, d.z]],
        }
    }

    #[inline]
    pub fn col(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    #[inline]
    pub fn row(&self, i: usize) -> Vec3<T> {
        Vec3::from_array(self.m[i])
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn matmul(&self, o: &Self) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = T::zero();
                for k in 0..3 {
                    s += self.m[i][k] * o.m[k][j];
                }
                r.m[i][j] = s;
            }
        }
        r
    }

    pub fn scale(&self, s: T) -> Self {
        let mut r = *self;
        r.m.iter_mut().flatten().for_each(|v| *v *= s);
        r
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] += o.m[i][j];
            }
        }
        r
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues).
    pub fn rotation_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        let Vec3 { x, y, z } = axis;
        Self {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        }
    }

    /// Rotation from a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(v: Vec3<T>) -> Self {
        let angle = v.norm();
        if angle < T::lit(1e-15) {
            return Self::identity();
        }
        Self::rotation_axis_angle(v * (T::one() / angle), angle)
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        let mut r = Mat3::<U>::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = U::lit(self.m[i][j].to_f64_lossy());
            }
        }
        r
    }
}

/// Quaternion stored as (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Default for Quat<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Quat<T> {
    pub const fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(self) -> Self {
        let inv = T::one() / self.norm();
        Self::new(self.w * inv, self.x * inv, self.y * inv, self.z * inv)
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_mat(self) -> Mat3<T> {
        let Quat { w, x, y, z } = self;
        let two = T::lit(2.0);
        let one = T::one();
        Mat3 {
            m: [
                [
                    one - two * (y * y + z * z),
                    two * (x * y - w * z),
                    two * (x * z + w * y),
                ],
                [
                    two * (x * y + w * z),
                    one - two * (x * x + z * z),
                    two * (y * z - w * x),
                ],
                [
                    two * (x * z - w * y),
                    two * (y * z + w * x),
                    one - two * (x * x + y * y),
                ],
            ],
        }
    }

    /// Adjoint of [`Quat::to_mat`]: maps dL/dR to dL/dq for a unit `q`.
    pub fn to_mat_backward(self, g: &Mat3<T>) -> [T; 4] {
        let Quat { w, x, y, z } = self;
        let two = T::lit(2.0);
        let g = &g.m;
        let dw = two
            * (x * (g[2][1] - g[1][2]) + y * (g[0][2] - g[2][0]) + z * (g[1][0] - g[0][1]));
        let dx = two
            * (-two * x * (g[1][1] + g[2][2])
                + y * (g[0][1] + g[1][0])
                + z * (g[0][2] + g[2][0])
                + w * (g[2][1] - g[1][2]));
        let dy = two
            * (x * (g[0][1] + g[1][0]) - two * y * (g[0][0] + g[2][2])
                + z * (g[1][2] + g[2][1])
                + w * (g[0][2] - g[2][0]));
        let dz = two
            * (x * (g[0][2] + g[2][0]) + y * (g[1][2] + g[2][1])
                - two * z * (g[0][0] + g[1][1])
                + w * (g[1][0] - g[0][1]));
        [dw, dx, dy, dz]
    }

    /// Unit quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_mat(r: &Mat3<T>) -> Self {
        let m = &r.m;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self::new(
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            )
        };
        q.normalize()
    }
}

/// Adjoint of `q -> q / |q|`: maps dL/d(q̂) to dL/dq.
pub fn normalize4_backward<T: Real>(q: [T; 4], g: [T; 4]) -> [T; 4] {
    let n = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let inv = T::one() / n;
    let qh = q.map(|v| v * inv);
    let dot: T = (0..4).map(|i| qh[i] * g[i]).sum();
    [0, 1, 2, 3].map(|i| (g[i] - qh[i] * dot) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_matrix_round_trip() {
        let q = Quat::new(0.3f64, -0.5, 0.7, 0.2).normalize();
        let r = q.to_mat();
        assert!((r.det() - 1.0).abs() < 1e-12);
        let back = Quat::from_mat(&r);
        let sign = if back.w * q.w < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in back.to_array().iter().zip(q.to_array()) {
            assert!((a * sign - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quat_product_matches_matrix_product() {
        let a = Quat::new(0.9f64, 0.1, -0.3, 0.2).normalize();
        let b = Quat::new(-0.2f64, 0.6, 0.4, 0.1).normalize();
        let lhs = a.mul(b).to_mat();
        let rhs = a.to_mat().matmul(&b.to_mat());
        for i in 0..3 {
            for j in 0..3 {
                assert!((lhs.m[i][j] - rhs.m[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn to_mat_backward_matches_finite_differences() {
        let q = Quat::new(0.4f64, -0.2, 0.5, 0.7);
        let g = Mat3 {
            m: [[0.3, -1.0, 0.2], [0.5, 0.1, -0.7], [0.9, 0.4, -0.3]],
        };
        let f = |q: Quat<f64>| -> f64 {
            let r = q.to_mat();
            (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| r.m[i][j] * g.m[i][j])
                .sum()
        };
        let an = q.to_mat_backward(&g);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = q.to_array();
            let mut m = q.to_array();
            p[k] += h;
            m[k] -= h;
            let fd = (f(Quat::from_array(p)) - f(Quat::from_array(m))) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-8, "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn rotation_vector_is_orthonormal() {
        let r = Mat3::from_rotation_vector(Vec3::new(0.3f64, -1.1, 0.4));
        let rtr = r.transpose().matmul(&r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr.m[i][j] - e).abs() < 1e-12);
            }
        }
        assert!((r.det() - 1.0).abs() < 1e-12);
    }
}
