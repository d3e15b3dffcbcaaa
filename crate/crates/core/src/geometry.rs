//! Triangle mesh, part masks, per-face local frames and polar coordinates
//! of local offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

/// Faces below this area are rejected when building frames.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    /// Part id of every face, contiguous `0..part_names.len()`.
    pub part_of_face: Vec<usize>,
    pub part_names: Vec<String>,
}

impl<T: Real> TriMesh<T> {
    /// Builds a mesh and checks index ranges and the part partition.
    pub fn new(
        vertices: Vec<Vec3<T>>,
        faces: Vec<[usize; 3]>,
        part_of_face: Vec<usize>,
        part_names: Vec<String>,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            part_of_face,
            part_names,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Mesh whose faces all belong to a single part named `all`.
    pub fn single_part(vertices: Vec<Vec3<T>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = faces.len();
        Self::new(vertices, faces, vec![0; n], vec!["all".into()])
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex out of range (have {nv})"
                )));
            }
        }
        if self.part_of_face.len() != self.faces.len() {
            return Err(Error::InvalidPartMask(format!(
                "{} part labels for {} faces",
                self.part_of_face.len(),
                self.faces.len()
            )));
        }
        let n_parts = self.part_names.len();
        let mut seen = vec![false; n_parts];
        for (fi, &p) in self.part_of_face.iter().enumerate() {
            if p >= n_parts {
                return Err(Error::InvalidPartMask(format!(
                    "face {fi} has part {p} but only {n_parts} parts exist"
                )));
            }
            seen[p] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartMask(format!(
                "part ids not contiguous: part {p} has no faces"
            )));
        }
        Ok(())
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn part_id(&self, name: &str) -> Option<usize> {
        self.part_names.iter().position(|n| n == name)
    }

    /// Face indices of every part, in face order.
    pub fn faces_by_part(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_parts()];
        for (fi, &p) in self.part_of_face.iter().enumerate() {
            out[p].push(fi);
        }
        out
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3<T>; 3] {
        self.faces[face].map(|v| self.vertices[v])
    }

    pub fn face_area(&self, face: usize) -> T {
        let [a, b, c] = self.face_vertices(face);
        (b - a).cross(c - a).norm() * T::lit(0.5)
    }

    pub fn face_frame(&self, face: usize) -> Result<FaceFrame<T>> {
        compute_face_frame(self, face)
    }

    /// Frames of every face, in face order.
    pub fn face_frames(&self) -> Result<Vec<FaceFrame<T>>> {
        (0..self.num_faces()).map(|f| self.face_frame(f)).collect()
    }

    pub fn cast<U: Real>(&self) -> TriMesh<U> {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v.cast()).collect(),
            faces: self.faces.clone(),
            part_of_face: self.part_of_face.clone(),
            part_names: self.part_names.clone(),
        }
    }
}

/// Local coordinate frame of a face: `global = scale * rotation * local + center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceFrame<T> {
    pub rotation: Mat3<T>,
    pub center: Vec3<T>,
    pub scale: T,
}

impl<T: Real> FaceFrame<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zero(),
            scale: T::one(),
        }
    }

    pub fn to_global_point(&self, local: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(local) * self.scale + self.center
    }

    pub fn to_local_point(&self, global: Vec3<T>) -> Vec3<T> {
        self.rotation
            .transpose()
            .mul_vec(global - self.center)
            * (T::one() / self.scale)
    }
}

/// Frame of `face_index`: centroid, edge-aligned tangent as x, normal as z,
/// mean edge length as scale.
pub fn compute_face_frame<T: Real>(mesh: &TriMesh<T>, face_index: usize) -> Result<FaceFrame<T>> {
    let [v0, v1, v2] = mesh.face_vertices(face_index);
    let e01 = v1 - v0;
    let e02 = v2 - v0;
    let e12 = v2 - v1;
    let normal = e01.cross(e02);
    let area = normal.norm() * T::lit(0.5);
    if !(area > T::lit(MIN_FACE_AREA)) {
        return Err(Error::DegenerateFace {
            face: face_index,
            area: area.to_f64_lossy(),
        });
    }
    let x_axis = e01.normalize();
    let z_axis = normal.normalize();
    let y_axis = z_axis.cross(x_axis).normalize();
    let third = T::one() / T::lit(3.0);
    Ok(FaceFrame {
        rotation: Mat3::from_cols(x_axis, y_axis, z_axis),
        center: (v0 + v1 + v2) * third,
        scale: (e01.norm() + e02.norm() + e12.norm()) * third,
    })
}

/// Local offset in spherical form: radius, angle to +x and angle to +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarMean<T> {
    pub r: T,
    pub theta: T,
    pub phi: T,
}

/// Radius below which a local offset counts as the zero vector.
pub const POLAR_ZERO_RADIUS: f64 = 1e-12;

pub fn to_polar<T: Real>(mu: Vec3<T>) -> PolarMean<T> {
    let r = mu.norm();
    if r < T::lit(POLAR_ZERO_RADIUS) {
        return PolarMean {
            r: T::zero(),
            theta: T::zero(),
            phi: T::zero(),
        };
    }
    let clamp = |c: T| c.max(-T::one()).min(T::one());
    PolarMean {
        r,
        theta: clamp(mu.x / r).acos(),
        phi: clamp(mu.z / r).acos(),
    }
}

/// Minimum radius for which [`polar_gradients`] is defined.
pub const POLAR_GRAD_MIN_RADIUS: f64 = 1e-8;
/// Pole margin: `|z/r|` must stay below `1 - POLAR_POLE_MARGIN`.
pub const POLAR_POLE_MARGIN: f64 = 1e-8;

/// Gradients of `r` and `phi` with respect to the cartesian offset.
pub fn polar_gradients<T: Real>(mu: Vec3<T>) -> Result<(Vec3<T>, Vec3<T>)> {
    let dr = radius_gradient(mu)?;
    let dphi = phi_gradient(mu)?;
    Ok((dr, dphi))
}

/// `∂r/∂μ = μ / r`.
pub fn radius_gradient<T: Real>(mu: Vec3<T>) -> Result<Vec3<T>> {
    let r = mu.norm();
    if !(r > T::lit(POLAR_GRAD_MIN_RADIUS)) {
        return Err(Error::NearSingular);
    }
    Ok(mu * (T::one() / r))
}

/// Gradient of `arccos(z / r)`; undefined on the z-axis.
pub fn phi_gradient<T: Real>(mu: Vec3<T>) -> Result<Vec3<T>> {
    let r = mu.norm();
    if !(r > T::lit(POLAR_GRAD_MIN_RADIUS)) {
        return Err(Error::NearSingular);
    }
    let c = mu.z / r;
    if !(c.abs() < T::one() - T::lit(POLAR_POLE_MARGIN)) {
        return Err(Error::NearSingular);
    }
    let inv_r = T::one() / r;
    // d(z/r)/dμ = e_z / r - z μ / r³
    let dc = Vec3::new(T::zero(), T::zero(), inv_r) - mu * (mu.z * inv_r * inv_r * inv_r);
    let s = -T::one() / (T::one() - c * c).sqrt();
    Ok(dc * s)
}

/// Names of the differentiable operations defined here; see [`crate::grad`].
pub const DIFF_OPS: &[&str] = &["geometry.polar_radius", "geometry.polar_phi"];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn tri(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> TriMesh<f64> {
        TriMesh::single_part(
            vec![Vec3::from_f64(a), Vec3::from_f64(b), Vec3::from_f64(c)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn unit_right_triangle_frame() {
        let f = tri([0., 0., 0.], [1., 0., 0.], [0., 1., 0.]).face_frame(0).unwrap();
        assert!((f.center - Vec3::new(1. / 3., 1. / 3., 0.)).max_abs() < 1e-15);
        assert_eq!(f.rotation.col(2), Vec3::new(0., 0., 1.));
        assert_eq!(f.rotation.col(0), Vec3::new(1., 0., 0.));
        assert!((f.scale - (2.0 + 2f64.sqrt()) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_face_rejected() {
        let m = tri([0., 0., 0.], [1., 0., 0.], [2., 0., 0.]);
        assert!(matches!(m.face_frame(0), Err(Error::DegenerateFace { face: 0, .. })));
    }

    #[test]
    fn frame_is_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: Vec<Vec3<f64>> = (0..3)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let m = TriMesh::single_part(v, vec![[0, 1, 2]]).unwrap();
            let Ok(f) = m.face_frame(0) else { continue };
            let rtr = f.rotation.transpose().matmul(&f.rotation);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((rtr.m[i][j] - e).abs() < 1e-9);
                }
            }
            assert!((f.rotation.det() - 1.0).abs() < 1e-9);
            assert!(f.scale > 0.0);
        }
    }

    #[test]
    fn polar_axis_cases() {
        let p = to_polar(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!((p.r, p.theta), (1.0, 0.0));
        assert!((p.phi - FRAC_PI_2).abs() < 1e-15);
        let p = to_polar(Vec3::new(0.0, 0.0, 1.0));
        assert!((p.theta - FRAC_PI_2).abs() < 1e-15 && p.phi == 0.0);
        let p = to_polar(Vec3::new(0.0, 0.0, -1.0));
        assert!((p.theta - FRAC_PI_2).abs() < 1e-15 && (p.phi - PI).abs() < 1e-15);
        let p = to_polar(Vec3::<f64>::zero());
        assert_eq!((p.r, p.theta, p.phi), (0.0, 0.0, 0.0));
    }

    #[test]
    fn polar_gradient_cases() {
        let (dr, _) = polar_gradients(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(dr, Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(phi_gradient(Vec3::new(0.0, 0.0, 1.0)), Err(Error::NearSingular)));
        assert!(matches!(radius_gradient(Vec3::<f64>::zero()), Err(Error::NearSingular)));
    }

    #[test]
    fn polar_gradient_matches_central_differences() {
        let mu = Vec3::new(0.3f64, 0.4, 0.5);
        let (dr, dphi) = polar_gradients(mu).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut p = mu;
            let mut m = mu;
            p[k] += h;
            m[k] -= h;
            let fd_r = (to_polar(p).r - to_polar(m).r) / (2.0 * h);
            let fd_phi = (to_polar(p).phi - to_polar(m).phi) / (2.0 * h);
            assert!((fd_r - dr[k]).abs() <= 1e-5 * dr[k].abs().max(1e-3));
            assert!((fd_phi - dphi[k]).abs() <= 1e-5 * dphi[k].abs().max(1e-3));
        }
    }

    #[test]
    fn partition_is_validated() {
        let v = vec![Vec3::<f64>::zero(); 3];
        let err = TriMesh::new(v.clone(), vec![[0, 1, 2]], vec![1], vec!["a".into(), "b".into()]);
        assert!(matches!(err, Err(Error::InvalidPartMask(_))));
        let err = TriMesh::new(v, vec![[0, 1, 3]], vec![0], vec!["a".into()]);
        assert!(matches!(err, Err(Error::InvalidMesh(_))));
    }
}
