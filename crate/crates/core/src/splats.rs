//! Gaussian attributes bound to mesh faces, the local-to-global transform,
//! and density control that keeps every child on its parent's face.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FaceFrame, TriMesh};
use crate::linalg::{normalize4_backward, Mat3, Quat, Vec3};
use crate::scalar::{logit, sigmoid, Real};

/// Number of scalar parameters per splat.
pub const PARAMS_PER_SPLAT: usize = 14;

/// One Gaussian in the local frame of its bound face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat<T> {
    pub mu_local: Vec3<T>,
    pub rot: Quat<T>,
    pub log_scale: Vec3<T>,
    pub color: Vec3<T>,
    pub opacity_logit: T,
}

impl<T: Real> Splat<T> {
    pub fn opacity(&self) -> T {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3<T> {
        self.log_scale.map(|v| v.exp())
    }

    /// Flat parameter vector: mean(3), rotation(4), log-scale(3), color(3), opacity logit(1).
    pub fn to_params(&self) -> [T; PARAMS_PER_SPLAT] {
        let m = self.mu_local;
        let q = self.rot;
        let s = self.log_scale;
        let c = self.color;
        [
            m.x,
            m.y,
            m.z,
            q.w,
            q.x,
            q.y,
            q.z,
            s.x,
            s.y,
            s.z,
            c.x,
            c.y,
            c.z,
            self.opacity_logit,
        ]
    }

    pub fn from_params(p: &[T]) -> Self {
        Self {
            mu_local: Vec3::new(p[0], p[1], p[2]),
            rot: Quat::new(p[3], p[4], p[5], p[6]),
            log_scale: Vec3::new(p[7], p[8], p[9]),
            color: Vec3::new(p[10], p[11], p[12]),
            opacity_logit: p[13],
        }
    }
}

/// Splats with their face bindings and the inverted face → splat index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatSet<T> {
    pub splats: Vec<Splat<T>>,
    pub binding: Vec<usize>,
    by_face: Vec<Vec<usize>>,
}

impl<T: Real> SplatSet<T> {
    pub fn new(splats: Vec<Splat<T>>, binding: Vec<usize>, num_faces: usize) -> Result<Self> {
        if splats.len() != binding.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} splats but {} bindings",
                splats.len(),
                binding.len()
            )));
        }
        if let Some(&f) = binding.iter().find(|&&f| f >= num_faces) {
            return Err(Error::Invalid(format!(
                "binding to face {f} but mesh has {num_faces} faces"
            )));
        }
        let mut set = Self {
            splats,
            binding,
            by_face: Vec::new(),
        };
        set.rebuild_index(num_faces);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn num_faces(&self) -> usize {
        self.by_face.len()
    }

    /// Splat indices bound to `face` (the set G_i).
    pub fn bound_to(&self, face: usize) -> &[usize] {
        &self.by_face[face]
    }

    pub fn rebuild_index(&mut self, num_faces: usize) {
        let mut by_face = vec![Vec::new(); num_faces];
        for (i, &f) in self.binding.iter().enumerate() {
            by_face[f].push(i);
        }
        self.by_face = by_face;
    }

    /// True when the inverted index agrees with `binding`.
    pub fn index_consistent(&self) -> bool {
        let listed: usize = self.by_face.iter().map(Vec::len).sum();
        listed == self.binding.len()
            && self
                .by_face
                .iter()
                .enumerate()
                .all(|(f, ids)| ids.iter().all(|&i| self.binding.get(i) == Some(&f)))
    }

    /// Renormalizes every rotation quaternion.
    pub fn normalize_rotations(&mut self) {
        for s in &mut self.splats {
            s.rot = s.rot.normalize();
        }
    }
}

/// A splat expressed in world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalSplat<T> {
    pub mean: Vec3<T>,
    pub rotation: Mat3<T>,
    pub scale: Vec3<T>,
    pub color: Vec3<T>,
    pub opacity: T,
}

impl<T: Real> GlobalSplat<T> {
    pub fn quaternion(&self) -> Quat<T> {
        Quat::from_mat(&self.rotation)
    }
}

/// Local-to-global transform of mean, rotation and scale.
pub fn to_global<T: Real>(splat: &Splat<T>, frame: &FaceFrame<T>) -> (Vec3<T>, Quat<T>, Vec3<T>) {
    let g = to_global_splat(splat, frame);
    let q = Quat::from_mat(&frame.rotation).mul(splat.rot.normalize()).normalize();
    (g.mean, q, g.scale)
}

/// Full world-space splat including activated color and opacity.
pub fn to_global_splat<T: Real>(splat: &Splat<T>, frame: &FaceFrame<T>) -> GlobalSplat<T> {
    GlobalSplat {
        mean: frame.to_global_point(splat.mu_local),
        rotation: frame.rotation.matmul(&splat.rot.normalize().to_mat()),
        scale: splat.scale() * frame.scale,
        color: splat.color,
        opacity: splat.opacity(),
    }
}

/// Gradient of a scalar loss with respect to world-space splat quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalGrad<T> {
    pub mean: Vec3<T>,
    pub rotation: Mat3<T>,
    pub scale: Vec3<T>,
    pub color: Vec3<T>,
    pub opacity: T,
}

impl<T: Real> Default for GlobalGrad<T> {
    fn default() -> Self {
        Self {
            mean: Vec3::zero(),
            rotation: Mat3::zero(),
            scale: Vec3::zero(),
            color: Vec3::zero(),
            opacity: T::zero(),
        }
    }
}

/// Gradient with respect to the raw local parameters of one splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatGrad<T> {
    pub mu_local: Vec3<T>,
    pub rot: [T; 4],
    pub log_scale: Vec3<T>,
    pub color: Vec3<T>,
    pub opacity_logit: T,
}

impl<T: Real> Default for SplatGrad<T> {
    fn default() -> Self {
        Self {
            mu_local: Vec3::zero(),
            rot: [T::zero(); 4],
            log_scale: Vec3::zero(),
            color: Vec3::zero(),
            opacity_logit: T::zero(),
        }
    }
}

impl<T: Real> SplatGrad<T> {
    pub fn to_params(&self) -> [T; PARAMS_PER_SPLAT] {
        let m = self.mu_local;
        let q = self.rot;
        let s = self.log_scale;
        let c = self.color;
        [
            m.x,
            m.y,
            m.z,
            q[0],
            q[1],
            q[2],
            q[3],
            s.x,
            s.y,
            s.z,
            c.x,
            c.y,
            c.z,
            self.opacity_logit,
        ]
    }
}

/// Adjoint of [`to_global_splat`]. Returns the local gradient and dL/d(face center).
pub fn to_global_backward<T: Real>(
    splat: &Splat<T>,
    frame: &FaceFrame<T>,
    g: &GlobalGrad<T>,
) -> (SplatGrad<T>, Vec3<T>) {
    let mu = frame.rotation.transpose().mul_vec(g.mean) * frame.scale;
    let q_unit = splat.rot.normalize();
    let d_local_rot = frame.rotation.transpose().matmul(&g.rotation);
    let d_qhat = q_unit.to_mat_backward(&d_local_rot);
    let rot = normalize4_backward(splat.rot.to_array(), d_qhat);
    let scale = splat.scale() * frame.scale;
    let log_scale = g.scale.hadamard(scale);
    let a = splat.opacity();
    let opacity_logit = g.opacity * a * (T::one() - a);
    (
        SplatGrad {
            mu_local: mu,
            rot,
            log_scale,
            color: g.color,
            opacity_logit,
        },
        g.mean,
    )
}

/// Default local log-scale of freshly initialized splats (half the face size).
pub fn default_log_scale<T: Real>() -> T {
    T::lit(0.5).ln()
}

/// Default opacity of freshly initialized splats.
pub const INITIAL_OPACITY: f64 = 0.1;

/// `per_face` splats at every face center.
pub fn initialize_on_mesh<T: Real>(mesh: &TriMesh<T>, per_face: usize) -> Result<SplatSet<T>> {
    if per_face == 0 {
        return Err(Error::Invalid("per_face must be at least 1".into()));
    }
    let proto = Splat {
        mu_local: Vec3::zero(),
        rot: Quat::identity(),
        log_scale: Vec3::splat(default_log_scale()),
        color: Vec3::splat(T::lit(0.5)),
        opacity_logit: logit(T::lit(INITIAL_OPACITY)),
    };
    let n = mesh.num_faces() * per_face;
    let binding: Vec<usize> = (0..mesh.num_faces())
        .flat_map(|f| std::iter::repeat_n(f, per_face))
        .collect();
    SplatSet::new(vec![proto; n], binding, mesh.num_faces())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyOptions {
    /// Accumulated screen-space position gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Largest local scale above which a splat is split instead of cloned.
    pub scale_threshold: f64,
    /// Children of a split get `parent_scale / split_factor`.
    pub split_factor: f64,
    /// Splats with opacity below this are removed.
    pub prune_opacity: f64,
    /// Upper bound on the number of splats after densification.
    pub max_splats: usize,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            scale_threshold: 0.6,
            split_factor: 1.6,
            prune_opacity: 5e-3,
            max_splats: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Faces left without any bound splat.
    pub empty_faces: Vec<usize>,
    /// For every output splat, the input splat it came from.
    pub origin: Vec<usize>,
}

/// Clones or splits high-gradient splats and prunes transparent ones.
/// Children always keep their parent's face binding.
pub fn densify_and_prune<T: Real>(
    set: &SplatSet<T>,
    grad_norms: &[T],
    opts: &DensifyOptions,
    seed: u64,
) -> Result<(SplatSet<T>, DensifyReport)> {
    if grad_norms.len() != set.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradient norms for {} splats",
            grad_norms.len(),
            set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DensifyReport::default();
    let mut splats = Vec::with_capacity(set.len());
    let mut binding = Vec::with_capacity(set.len());
    let mut budget = opts.max_splats.saturating_sub(set.len());
    let prune = T::lit(opts.prune_opacity);
    let shrink = T::lit(opts.split_factor).ln();

    for (i, (s, &face)) in set.splats.iter().zip(&set.binding).enumerate() {
        if s.opacity() < prune {
            report.pruned += 1;
            continue;
        }
        let grow = grad_norms[i] > T::lit(opts.grad_threshold) && budget > 0;
        if !grow {
            splats.push(*s);
            binding.push(face);
            report.origin.push(i);
            continue;
        }
        budget -= 1;
        let largest = s.scale().x.max(s.scale().y).max(s.scale().z);
        if largest > T::lit(opts.scale_threshold) {
            // Split: two smaller children sampled inside the parent's footprint.
            let rot = s.rot.normalize().to_mat();
            for _ in 0..2 {
                let n = Vec3::new(
                    T::lit(StandardNormal.sample(&mut rng)),
                    T::lit(StandardNormal.sample(&mut rng)),
                    T::lit(StandardNormal.sample(&mut rng)),
                );
                let mut child = *s;
                child.mu_local = s.mu_local + rot.mul_vec(n.hadamard(s.scale()));
                child.log_scale = s.log_scale.map(|v| v - shrink);
                splats.push(child);
                binding.push(face);
                report.origin.push(i);
            }
            report.split += 1;
        } else {
            splats.push(*s);
            splats.push(*s);
            binding.extend([face, face]);
            report.origin.extend([i, i]);
            report.cloned += 1;
        }
    }
    if splats.is_empty() {
        return Err(Error::EmptySet);
    }
    let out = SplatSet::new(splats, binding, set.num_faces())?;
    report.empty_faces = (0..out.num_faces())
        .filter(|&f| out.bound_to(f).is_empty())
        .collect();
    Ok((out, report))
}

pub const DIFF_OPS: &[&str] = &["splats.to_global"];
