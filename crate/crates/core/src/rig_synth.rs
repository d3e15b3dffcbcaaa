//! Synthetic rig and ground-truth scenes.
//!
//! A linear blendshape rig over a UV-sphere "head" stands in for a tracked
//! morphable model. Targets are rendered with the same rasterizer that is
//! later trained, so a perfect fit is reachable by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FaceFrame, TriMesh};
use crate::image::Image;
use crate::linalg::{Mat3, Quat, Vec3};
use crate::mouth_struct::{apply_part_offsets_in_place, build_mouth_structure, splice, MouthParts};
use crate::renderer::{render, Camera, RenderSettings};
use crate::scalar::{logit, Real};
use crate::splats::{to_global_splat, GlobalSplat, Splat, SplatSet};

/// Per-frame animation parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigParams {
    pub expr: Vec<f64>,
    /// Joint angles; entry 0 is the jaw.
    pub pose: Vec<f64>,
    /// Global rotation as a rotation vector.
    pub rot: [f64; 3],
    pub trans: [f64; 3],
    /// Normalized timestep in [0, 1).
    pub t: f64,
}

impl RigParams {
    pub fn neutral(expr_dim: usize, pose_dim: usize) -> Self {
        Self {
            expr: vec![0.0; expr_dim],
            pose: vec![0.0; pose_dim],
            ..Default::default()
        }
    }
}

/// Rotation of a vertex subset about a pivot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub pivot: Vec3<f64>,
    pub axis: Vec3<f64>,
    /// Vertices with weight one; all others have weight zero.
    pub vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendRig {
    pub base: TriMesh<f64>,
    /// `basis[k][v]`: displacement of vertex `v` per unit of `expr[k]`.
    pub basis: Vec<Vec<Vec3<f64>>>,
    pub jaw: Option<Joint>,
    pub mouth: Option<MouthParts>,
}

impl BlendRig {
    pub fn expr_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn pose_dim(&self) -> usize {
        usize::from(self.jaw.is_some())
    }

    pub fn neutral_params(&self) -> RigParams {
        RigParams::neutral(self.expr_dim(), self.pose_dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let nv = self.base.vertices.len();
        if self.basis.iter().any(|b| b.len() != nv) {
            return Err(Error::DimensionMismatch("expression basis vertex count".into()));
        }
        if let Some(j) = &self.jaw {
            if j.vertices.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh("jaw vertex out of range".into()));
            }
        }
        Ok(())
    }
}

/// `global(R, t) ∘ jaw(Θ) ∘ (V_base + B ψ)`.
pub fn evaluate_rig(rig: &BlendRig, params: &RigParams) -> Result<TriMesh<f64>> {
    if params.expr.len() != rig.expr_dim() {
        return Err(Error::DimensionMismatch(format!(
            "expression has {} coefficients, rig expects {}",
            params.expr.len(),
            rig.expr_dim()
        )));
    }
    if params.pose.len() != rig.pose_dim() {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} angles, rig expects {}",
            params.pose.len(),
            rig.pose_dim()
        )));
    }
    let mut mesh = rig.base.clone();
    for (k, &psi) in params.expr.iter().enumerate() {
        if psi != 0.0 {
            for (v, d) in mesh.vertices.iter_mut().zip(&rig.basis[k]) {
                *v += *d * psi;
            }
        }
    }
    if let Some(j) = &rig.jaw {
        let angle = params.pose[0];
        if angle != 0.0 {
            let r = Mat3::rotation_axis_angle(j.axis, angle);
            for &v in &j.vertices {
                mesh.vertices[v] = r.mul_vec(mesh.vertices[v] - j.pivot) + j.pivot;
            }
        }
    }
    let rot = Vec3::from_array(params.rot);
    let trans = Vec3::from_array(params.trans);
    if rot != Vec3::zero() || trans != Vec3::zero() {
        let r = Mat3::from_rotation_vector(rot);
        for v in &mut mesh.vertices {
            *v = r.mul_vec(*v) + trans;
        }
    }
    Ok(mesh)
}

/// World-space splats on a posed mesh.
pub fn pose_splats<T: Real>(mesh: &TriMesh<T>, set: &SplatSet<T>) -> Result<Vec<GlobalSplat<T>>> {
    let frames: Vec<FaceFrame<T>> = mesh.face_frames()?;
    Ok(set
        .splats
        .iter()
        .zip(&set.binding)
        .map(|(s, &f)| to_global_splat(s, &frames[f]))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Plain sphere split into three latitude bands, no mouth.
    Smoke,
    /// Sphere head with eight named parts, a mouth slit, jaw and mouth interior.
    Head,
}

/// Distance of reference splats from their face, in local (face-scale) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailSpec {
    pub part: String,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_distance: f64,
    pub frames: usize,
    pub expr_dim: usize,
    pub splats_per_face: usize,
    pub detail: Vec<DetailSpec>,
    pub default_detail: f64,
    pub yaw_amp: f64,
    pub pitch_amp: f64,
    pub jaw_amp: f64,
    pub expr_amp: f64,
    /// Magnitude of the per-frame mouth-part offsets (linear in ψ); 0 disables.
    pub mouth_motion: f64,
    pub mouth_depth: f64,
    /// Local scale of reference splats relative to their face.
    pub splat_scale: f64,
    /// Scales the per-splat randomness of rotation, scale and colour.
    pub jitter: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::smoke()
    }
}

impl SceneSpec {
    /// 3 parts, 200 faces with one splat each, 20 frames at 64×64.
    pub fn smoke() -> Self {
        Self {
            kind: SceneKind::Smoke,
            width: 64,
            height: 64,
            focal: 90.0,
            camera_distance: 4.0,
            frames: 20,
            expr_dim: 2,
            splats_per_face: 1,
            detail: Vec::new(),
            default_detail: 0.02,
            yaw_amp: 0.5,
            pitch_amp: 0.25,
            jaw_amp: 0.0,
            expr_amp: 0.5,
            mouth_motion: 0.0,
            mouth_depth: 0.3,
            splat_scale: 0.5,
            jitter: 1.0,
            background: [0.0; 3],
        }
    }

    /// Head with far-off-surface detail on scalp, neck and jaw.
    pub fn aps() -> Self {
        Self {
            kind: SceneKind::Head,
            frames: 24,
            expr_dim: 3,
            detail: vec![
                DetailSpec {
                    part: "scalp".into(),
                    offset: 0.5,
                },
                DetailSpec {
                    part: "neck".into(),
                    offset: 0.5,
                },
                DetailSpec {
                    part: "jaw".into(),
                    offset: 0.5,
                },
            ],
            default_detail: 0.02,
            yaw_amp: 0.9,
            pitch_amp: 0.5,
            jaw_amp: 0.15,
            splat_scale: 0.2,
            jitter: 0.3,
            ..Self::smoke()
        }
    }

    /// Head whose mouth interior moves with the expression.
    pub fn ablation() -> Self {
        Self {
            kind: SceneKind::Head,
            frames: 30,
            expr_dim: 3,
            default_detail: 0.02,
            yaw_amp: 0.3,
            pitch_amp: 0.15,
            jaw_amp: 0.1,
            expr_amp: 1.0,
            mouth_motion: 0.12,
            ..Self::smoke()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("scene image size must be positive".into()));
        }
        if self.frames == 0 || self.splats_per_face == 0 {
            return Err(Error::Invalid("frames and splats_per_face must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Invalid("jitter must be non-negative".into()));
        }
        if !(self.splat_scale > 0.0) {
            return Err(Error::Invalid("splat_scale must be positive".into()));
        }
        if !(self.focal > 0.0 && self.camera_distance > 1.5) {
            return Err(Error::Invalid("camera must sit outside the head with positive focal".into()));
        }
        if self.mouth_motion != 0.0 && self.kind == SceneKind::Smoke {
            return Err(Error::Invalid("the smoke scene has no mouth".into()));
        }
        Ok(())
    }

    pub fn detail_for(&self, part_name: &str) -> f64 {
        self.detail
            .iter()
            .find(|d| d.part == part_name)
            .map_or(self.default_detail, |d| d.offset)
    }

    pub fn camera(&self) -> Result<Camera<f64>> {
        Camera::look_at(
            Vec3::new(0.0, 0.0, self.camera_distance),
            Vec3::zero(),
            Vec3::new(0.0, 1.0, 0.0),
            self.focal,
            self.width,
            self.height,
        )
    }
}

pub const HEAD_PART_NAMES: [&str; 8] = ["face", "lips", "eyes", "ears", "nose", "scalp", "neck", "jaw"];
pub const SMOKE_PART_NAMES: [&str; 3] = ["top", "middle", "bottom"];

const HEAD_LON: usize = 32;
const HEAD_LAT: usize = 12;
const HEAD_WARP: f64 = 3.0;
const UPPER_LIP_ROW: usize = 7;
const MOUTH_HALF_WIDTH: usize = 7;
/// Radial scale of lip-ring vertices; keeps the teeth arc inside the head.
const LIP_RECESS: f64 = 0.85;
const SMOKE_LON: usize = 10;
const SMOKE_LAT: usize = 11;

/// Unit UV sphere with `lat - 1` rings and two poles. Azimuth 0 faces +z;
/// `warp > 0` packs longitudes toward the front.
struct UvSphere {
    vertices: Vec<Vec3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Latitude band and longitude cell of each face.
    cells: Vec<(usize, usize)>,
    lon: usize,
}

impl UvSphere {
    fn new(lon: usize, lat: usize, warp: f64) -> Self {
        let mut vertices = vec![Vec3::new(0.0, 1.0, 0.0)];
        for i in 1..lat {
            let a = std::f64::consts::PI * i as f64 / lat as f64;
            for j in 0..lon {
                let x = -1.0 + 2.0 * j as f64 / lon as f64;
                let b = std::f64::consts::PI * (x + warp * x * x * x) / (1.0 + warp);
                vertices.push(Vec3::new(a.sin() * b.sin(), a.cos(), a.sin() * b.cos()));
            }
        }
        vertices.push(Vec3::new(0.0, -1.0, 0.0));
        let south = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * lon + j % lon;
        let mut faces = Vec::new();
        let mut cells = Vec::new();
        for j in 0..lon {
            faces.push([0, ring(1, j), ring(1, j + 1)]);
            cells.push((0, j));
        }
        for i in 1..lat - 1 {
            for j in 0..lon {
                faces.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                faces.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
                cells.push((i, j));
                cells.push((i, j));
            }
        }
        for j in 0..lon {
            faces.push([south, ring(lat - 1, j + 1), ring(lat - 1, j)]);
            cells.push((lat - 1, j));
        }
        for f in &mut faces {
            let [a, b, c] = f.map(|v| vertices[v]);
            let n = (b - a).cross(c - a);
            if n.dot(a + b + c) < 0.0 {
                f.swap(1, 2);
            }
        }
        Self {
            vertices,
            faces,
            cells,
            lon,
        }
    }

    fn ring_vertex(&self, row: usize, j: usize) -> usize {
        1 + (row - 1) * self.lon + j % self.lon
    }
}

fn smoke_mesh() -> Result<TriMesh<f64>> {
    let s = UvSphere::new(SMOKE_LON, SMOKE_LAT, 0.0);
    let part = s
        .cells
        .iter()
        .map(|&(band, _)| match band {
            0..=3 => 0,
            4..=6 => 1,
            _ => 2,
        })
        .collect();
    TriMesh::new(s.vertices, s.faces, part, SMOKE_PART_NAMES.map(String::from).to_vec())
}

fn head_part(band: usize, j: usize, c: Vec3<f64>, mouth_cols: &std::ops::Range<usize>) -> usize {
    let in_mouth = mouth_cols.contains(&j);
    let part = if in_mouth && band == UPPER_LIP_ROW - 1 {
        "lips"
    } else if in_mouth && band == UPPER_LIP_ROW + 1 {
        "jaw"
    } else if c.y < -0.75 {
        "neck"
    } else if c.y > 0.5 {
        "scalp"
    } else if (c.x.abs() > 0.8 && c.y.abs() < 0.5) || c.z < -0.3 {
        // sides and back of the head
        "ears"
    } else if c.z > 0.5 && (0.05..0.45).contains(&c.y) && (0.15..0.5).contains(&c.x.abs()) {
        "eyes"
    } else if c.z > 0.8 && c.x.abs() < 0.15 && (-0.2..0.3).contains(&c.y) {
        "nose"
    } else if c.z > 0.3 && c.y < -0.45 {
        "jaw"
    } else {
        "face"
    };
    HEAD_PART_NAMES.iter().position(|&n| n == part).expect("known part")
}

/// Head mesh before the mouth interior, plus the two lip rings.
pub fn head_base_mesh() -> Result<(TriMesh<f64>, Vec<usize>, Vec<usize>)> {
    let s = UvSphere::new(HEAD_LON, HEAD_LAT, HEAD_WARP);
    let front = HEAD_LON / 2;
    let cols = front - MOUTH_HALF_WIDTH..front + MOUTH_HALF_WIDTH;
    let mut faces = Vec::new();
    let mut parts = Vec::new();
    for (f, &(band, j)) in s.faces.iter().zip(&s.cells) {
        if band == UPPER_LIP_ROW && cols.contains(&j) {
            continue;
        }
        let [a, b, c] = f.map(|v| s.vertices[v]);
        faces.push(*f);
        parts.push(head_part(band, j, (a + b + c) * (1.0 / 3.0), &cols));
    }
    let ring = |row: usize| -> Vec<usize> {
        (front - MOUTH_HALF_WIDTH..=front + MOUTH_HALF_WIDTH)
            .map(|j| s.ring_vertex(row, j))
            .collect()
    };
    let upper = ring(UPPER_LIP_ROW);
    let lower = ring(UPPER_LIP_ROW + 1);
    let mut vertices = s.vertices;
    for &v in upper.iter().chain(&lower) {
        let p = vertices[v];
        vertices[v] = Vec3::new(p.x * LIP_RECESS, p.y, p.z * LIP_RECESS);
    }
    let mesh = TriMesh::new(vertices, faces, parts, HEAD_PART_NAMES.map(String::from).to_vec())?;
    Ok((mesh, upper, lower))
}

/// Smooth displacement fields, one per expression coefficient.
fn expression_basis(vertices: &[Vec3<f64>], dim: usize, active: usize) -> Vec<Vec<Vec3<f64>>> {
    let bump = |v: Vec3<f64>, c: Vec3<f64>| (-(v - c).norm_sq() / (2.0 * 0.35 * 0.35)).exp();
    (0..dim)
        .map(|k| {
            let amp = 0.05 / (1.0 + (k / 4) as f64);
            vertices
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i >= active {
                        return Vec3::zero();
                    }
                    let d = match k % 4 {
                        0 => Vec3::new(v.x.signum(), 0.0, 0.0) * bump(v, Vec3::new(0.0, -0.38, 0.92)),
                        1 => Vec3::new(0.0, 1.0, 0.0) * bump(v, Vec3::new(0.0, 0.35, 0.93)),
                        2 => v * bump(v, Vec3::new(0.0, -0.1, 0.99)),
                        _ => Vec3::new(0.0, -1.0, 0.0) * bump(v, Vec3::new(0.0, -0.6, 0.8)),
                    };
                    d * amp
                })
                .collect()
        })
        .collect()
}

pub fn build_rig(spec: &SceneSpec) -> Result<BlendRig> {
    let rig = match spec.kind {
        SceneKind::Smoke => {
            let base = smoke_mesh()?;
            let n = base.vertices.len();
            BlendRig {
                basis: expression_basis(&base.vertices, spec.expr_dim, n),
                base,
                jaw: None,
                mouth: None,
            }
        }
        SceneKind::Head => {
            let (head, upper, lower) = head_base_mesh()?;
            let aug = build_mouth_structure(&head, &upper, &lower, spec.mouth_depth)?;
            let (base, mouth) = splice(&head, &aug)?;
            let jaw_part = base.part_id("jaw").expect("head has a jaw");
            let mut weighted = vec![false; base.vertices.len()];
            for (f, face) in base.faces.iter().enumerate() {
                let p = base.part_of_face[f];
                if p == jaw_part || p == mouth.lower_part {
                    for &v in face {
                        weighted[v] = true;
                    }
                }
            }
            let jaw = Joint {
                pivot: Vec3::new(0.0, -0.15, -0.1),
                axis: Vec3::new(1.0, 0.0, 0.0),
                vertices: (0..weighted.len()).filter(|&v| weighted[v]).collect(),
            };
            BlendRig {
                basis: expression_basis(&base.vertices, spec.expr_dim, head.vertices.len()),
                base,
                jaw: Some(jaw),
                mouth: Some(mouth),
            }
        }
    };
    rig.validate()?;
    Ok(rig)
}

/// Ground-truth world offsets of the two mouth parts, linear in ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MouthMotion {
    pub upper: Vec<Vec3<f64>>,
    pub lower: Vec<Vec3<f64>>,
}

impl MouthMotion {
    pub fn offsets(&self, expr: &[f64]) -> (Vec3<f64>, Vec3<f64>) {
        let mix = |cols: &[Vec3<f64>]| cols.iter().zip(expr).fold(Vec3::zero(), |a, (c, &p)| a + *c * p);
        (mix(&self.upper), mix(&self.lower))
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub rig: BlendRig,
    pub camera: Camera<f64>,
    pub params: Vec<RigParams>,
    pub images: Vec<Image<f64>>,
    pub reference: SplatSet<f64>,
    /// Parts whose reference splats sit farther off the surface than the default.
    pub flexible_truth: Vec<usize>,
    pub mouth_motion: Option<MouthMotion>,
}

fn frame_params(spec: &SceneSpec, rig: &BlendRig, rng: &mut ChaCha8Rng) -> Vec<RigParams> {
    let tau = std::f64::consts::TAU;
    let phases: Vec<f64> = (0..spec.expr_dim + 3).map(|_| rng.random::<f64>() * tau).collect();
    let n = spec.frames;
    (0..n)
        .map(|f| {
            let s = f as f64 / n as f64;
            let expr = (0..spec.expr_dim)
                .map(|k| spec.expr_amp * (tau * s * (k + 1) as f64 + phases[k]).sin())
                .collect();
            let pose = if rig.pose_dim() == 1 {
                vec![spec.jaw_amp * 0.5 * (1.0 + (tau * s * 2.0 + phases[spec.expr_dim]).sin())]
            } else {
                Vec::new()
            };
            let yaw = spec.yaw_amp * (tau * s + phases[spec.expr_dim + 1]).sin();
            let pitch = spec.pitch_amp * (tau * s * 2.0 + phases[spec.expr_dim + 2]).sin();
            let r = Mat3::rotation_axis_angle(Vec3::new(0.0, 1.0, 0.0), yaw)
                .matmul(&Mat3::rotation_axis_angle(Vec3::new(1.0, 0.0, 0.0), pitch));
            RigParams {
                expr,
                pose,
                rot: rotation_vector(&r).to_array(),
                trans: [0.0; 3],
                t: s,
            }
        })
        .collect()
}

/// Axis times angle of a rotation matrix.
pub fn rotation_vector(r: &Mat3<f64>) -> Vec3<f64> {
    let q = Quat::from_mat(r).normalize();
    let q = if q.w < 0.0 { Quat { w: -q.w, x: -q.x, y: -q.y, z: -q.z } } else { q };
    let v = Vec3::new(q.x, q.y, q.z);
    let s = v.norm();
    if s < 1e-15 {
        return Vec3::zero();
    }
    v * (2.0 * s.atan2(q.w) / s)
}

fn reference_splats(spec: &SceneSpec, mesh: &TriMesh<f64>, rng: &mut ChaCha8Rng) -> Result<SplatSet<f64>> {
    let mut splats = Vec::new();
    let mut binding = Vec::new();
    let palette = [
        [0.85, 0.65, 0.55],
        [0.75, 0.3, 0.3],
        [0.2, 0.35, 0.6],
        [0.8, 0.6, 0.5],
        [0.9, 0.7, 0.6],
        [0.35, 0.2, 0.1],
        [0.7, 0.55, 0.45],
        [0.8, 0.6, 0.5],
        [0.95, 0.95, 0.9],
        [0.6, 0.15, 0.2],
    ];
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    for f in 0..mesh.num_faces() {
        let part = mesh.part_of_face[f];
        let offset = spec.detail_for(&mesh.part_names[part]);
        let base = palette[part % palette.len()];
        for _ in 0..spec.splats_per_face {
            // Uniform direction on the upper hemisphere of the face frame.
            let cos_tilt = rng.random::<f64>();
            let sin_tilt = (1.0 - cos_tilt * cos_tilt).sqrt();
            let az = std::f64::consts::TAU * rng.random::<f64>();
            let dir = Vec3::new(sin_tilt * az.cos(), sin_tilt * az.sin(), cos_tilt);
            let mag = offset * (0.8 + 0.4 * rng.random::<f64>());
            let rot = Quat {
                w: 1.0,
                x: 0.2 * spec.jitter * normal(rng),
                y: 0.2 * spec.jitter * normal(rng),
                z: 0.2 * spec.jitter * normal(rng),
            }
            .normalize();
            let log_scale =
                Vec3::new(normal(rng), normal(rng), normal(rng)) * (0.15 * spec.jitter) + Vec3::splat(spec.splat_scale.ln());
            let color = Vec3::from_array(base.map(|c| (c + 0.5 * spec.jitter * (rng.random::<f64>() - c)).clamp(0.02, 0.98)));
            let opacity: f64 = 0.6 + 0.35 * rng.random::<f64>();
            splats.push(Splat {
                mu_local: dir * mag,
                rot,
                log_scale,
                color,
                opacity_logit: logit(opacity),
            });
            binding.push(f);
        }
    }
    SplatSet::new(splats, binding, mesh.num_faces())
}

/// Posed mesh for one frame, including any mouth-part offsets.
pub fn posed_mesh(rig: &BlendRig, params: &RigParams, mouth_offsets: Option<(Vec3<f64>, Vec3<f64>)>) -> Result<TriMesh<f64>> {
    let mut mesh = evaluate_rig(rig, params)?;
    if let (Some(parts), Some((u, l))) = (&rig.mouth, mouth_offsets) {
        apply_part_offsets_in_place(&mut mesh, parts, u, l);
    }
    Ok(mesh)
}

pub fn render_frame(
    rig: &BlendRig,
    splats: &SplatSet<f64>,
    params: &RigParams,
    mouth_offsets: Option<(Vec3<f64>, Vec3<f64>)>,
    camera: &Camera<f64>,
    settings: &RenderSettings<f64>,
) -> Result<Image<f64>> {
    let mesh = posed_mesh(rig, params, mouth_offsets)?;
    Ok(render(&pose_splats(&mesh, splats)?, camera, settings))
}

/// Builds the rig, the reference splats and every target frame.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let rig = build_rig(spec)?;
    let camera = spec.camera()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = frame_params(spec, &rig, &mut rng);
    let reference = reference_splats(spec, &rig.base, &mut rng)?;
    let mouth_motion = (spec.mouth_motion != 0.0 && rig.mouth.is_some()).then(|| {
        let mut col = || {
            Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)).normalize()
                * spec.mouth_motion
        };
        MouthMotion {
            upper: (0..spec.expr_dim).map(|_| col()).collect(),
            lower: (0..spec.expr_dim).map(|_| col()).collect(),
        }
    });
    let settings = RenderSettings {
        background: Vec3::from_array(spec.background),
        full_frame_boxes: false,
    };
    let images = params
        .iter()
        .map(|p| {
            let offsets = mouth_motion.as_ref().map(|m| m.offsets(&p.expr));
            render_frame(&rig, &reference, p, offsets, &camera, &settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let flexible_truth = (0..rig.base.num_parts())
        .filter(|&p| {
            let is_mouth = rig.mouth.as_ref().is_some_and(|m| m.which(p).is_some());
            !is_mouth && spec.detail_for(&rig.base.part_names[p]) > spec.default_detail
        })
        .collect();
    Ok(Scene {
        spec: spec.clone(),
        seed,
        rig,
        camera,
        params,
        images,
        reference,
        flexible_truth,
        mouth_motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_rig() -> BlendRig {
        build_rig(&SceneSpec::aps()).unwrap()
    }

    #[test]
    fn smoke_mesh_shape() {
        let rig = build_rig(&SceneSpec::smoke()).unwrap();
        assert_eq!(rig.base.num_faces(), 200);
        assert_eq!(rig.base.num_parts(), 3);
        for f in 0..200 {
            let [a, b, c] = rig.base.face_vertices(f);
            assert!((b - a).cross(c - a).dot(a + b + c) > 0.0, "outward winding");
        }
    }

    #[test]
    fn head_has_ten_nonempty_parts() {
        let rig = head_rig();
        assert_eq!(rig.base.num_parts(), 10);
        for (p, faces) in rig.base.faces_by_part().iter().enumerate() {
            assert!(!faces.is_empty(), "part {} empty", rig.base.part_names[p]);
        }
        assert!(rig.base.face_frames().is_ok());
    }

    #[test]
    fn neutral_params_return_base() {
        let rig = head_rig();
        assert_eq!(evaluate_rig(&rig, &rig.neutral_params()).unwrap(), rig.base);
    }

    #[test]
    fn translation_shifts_every_vertex() {
        let rig = head_rig();
        let mut p = rig.neutral_params();
        p.trans = [0.1, -0.2, 0.3];
        let m = evaluate_rig(&rig, &p).unwrap();
        for (a, b) in m.vertices.iter().zip(&rig.base.vertices) {
            assert!((*a - *b - Vec3::new(0.1, -0.2, 0.3)).max_abs() < 1e-15);
        }
    }

    #[test]
    fn jaw_rotation_is_rigid_on_jaw_vertices() {
        let rig = head_rig();
        let mut p = rig.neutral_params();
        p.pose = vec![0.3];
        let m = evaluate_rig(&rig, &p).unwrap();
        let jaw = rig.jaw.as_ref().unwrap();
        let ids = &jaw.vertices;
        for i in (0..ids.len()).step_by(7) {
            for j in (i + 1..ids.len()).step_by(5) {
                let d0 = (rig.base.vertices[ids[i]] - rig.base.vertices[ids[j]]).norm();
                let d1 = (m.vertices[ids[i]] - m.vertices[ids[j]]).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        let mut moved = vec![false; m.vertices.len()];
        for &v in ids {
            moved[v] = true;
        }
        for v in 0..m.vertices.len() {
            if !moved[v] {
                assert_eq!(m.vertices[v], rig.base.vertices[v]);
            }
        }
    }

    #[test]
    fn expression_is_linear() {
        let rig = head_rig();
        let mut a = rig.neutral_params();
        a.expr = vec![0.3, -0.7, 0.2];
        let mut b = rig.neutral_params();
        b.expr = vec![-0.1, 0.4, 0.9];
        let mut ab = rig.neutral_params();
        ab.expr = vec![0.2, -0.3, 1.1];
        let (ma, mb, mab) = (
            evaluate_rig(&rig, &a).unwrap(),
            evaluate_rig(&rig, &b).unwrap(),
            evaluate_rig(&rig, &ab).unwrap(),
        );
        for v in 0..rig.base.vertices.len() {
            let lhs = mab.vertices[v] - rig.base.vertices[v];
            let rhs = (ma.vertices[v] - rig.base.vertices[v]) + (mb.vertices[v] - rig.base.vertices[v]);
            assert!((lhs - rhs).max_abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let rig = head_rig();
        let mut p = rig.neutral_params();
        p.expr.push(1.0);
        assert!(matches!(evaluate_rig(&rig, &p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rotation_vector_round_trip() {
        let v = Vec3::new(0.3, -0.5, 0.2);
        let r = Mat3::from_rotation_vector(v);
        assert!((rotation_vector(&r) - v).max_abs() < 1e-12);
    }

    #[test]
    fn scene_is_deterministic_and_tracks_truth() {
        let spec = SceneSpec {
            frames: 3,
            ..SceneSpec::aps()
        };
        let a = generate_scene(&spec, 5).unwrap();
        let b = generate_scene(&spec, 5).unwrap();
        assert_eq!(a.images, b.images);
        let names: Vec<&str> = a.flexible_truth.iter().map(|&p| a.rig.base.part_names[p].as_str()).collect();
        assert_eq!(names, vec!["scalp", "neck", "jaw"]);
        for img in &a.images {
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.data.iter().any(|&v| v > 0.05));
        }
    }

    #[test]
    fn zero_detail_sits_on_surface() {
        let spec = SceneSpec {
            frames: 1,
            default_detail: 0.0,
            ..SceneSpec::smoke()
        };
        let s = generate_scene(&spec, 1).unwrap();
        assert!(s.reference.splats.iter().all(|sp| sp.mu_local == Vec3::zero()));
    }
}
