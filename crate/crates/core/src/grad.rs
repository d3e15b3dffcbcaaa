//! Adjoint interface shared by differentiable operations, and the
//! central-difference harness that checks them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aps::FaceSet;
use crate::deform_net::{DeformConfig, DeformMLP, PosEncoding};
use crate::error::{Error, Result};
use crate::geometry::{phi_gradient, radius_gradient, to_polar, FaceFrame, TriMesh};
use crate::image::Image;
use crate::linalg::{normalize4_backward, Mat3, Quat, Vec3};
use crate::losses::{effective_phi, loss_reg, loss_rgb, ssim, ssim_with_grad, RegConfig, DEFAULT_LAMBDA};
use crate::mouth_struct::{apply_part_offsets, apply_part_offsets_backward, MouthParts};
use crate::renderer::{
    project, project_vjp, render_backward, render_with_cache, Camera, RenderSettings, ScreenGrad, FOOTPRINT_M2,
};
use crate::splats::{to_global_backward, to_global_splat, GlobalGrad, GlobalSplat, Splat, SplatSet};

/// Distance kept from every non-differentiable set when sampling.
pub const KINK_MARGIN: f64 = 1e-3;
/// Largest `|z/r|` accepted for polar-angle gradients.
pub const POLE_LIMIT: f64 = 0.999;

/// A differentiable map `R^n -> R^m` with its vector-Jacobian product.
pub trait DiffOp {
    fn name(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `upstream^T J(x)`, one entry per input coordinate.
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;
    /// Draws an input outside the exclusion zones.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// `SampledAtKink` when `x` is too close to a non-differentiable set.
    fn check_domain(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub trials: usize,
    pub h: f64,
    /// Denominator floor of the relative error, as a fraction of the largest
    /// analytic component in the same trial.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            h: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

/// Worst coordinate seen over all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn to_line(&self) -> String {
        format!(
            "op={} trials={} max_rel_err={:e} trial={} coord={} analytic={:e} numeric={:e}",
            self.op, self.trials, self.max_rel_error, self.worst_trial, self.worst_coord, self.analytic, self.numeric
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares `vjp` against central differences of `upstream . forward` for
/// every input coordinate, with a random Gaussian upstream per trial.
pub fn check_gradients(
    op: &dyn DiffOp,
    sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    cfg: &CheckConfig,
) -> Result<GradReport> {
    if !(cfg.h > 0.0) || cfg.trials == 0 {
        return Err(Error::Invalid("gradient check needs h > 0 and at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport {
        op: op.name().to_string(),
        trials: cfg.trials,
        max_rel_error: 0.0,
        worst_trial: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for trial in 0..cfg.trials {
        let x = sampler(&mut rng);
        if x.len() != op.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}: sampled {} inputs, expected {}",
                op.name(),
                x.len(),
                op.input_dim()
            )));
        }
        op.check_domain(&x)?;
        let upstream: Vec<f64> = (0..op.output_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let analytic = op.vjp(&x, &upstream)?;
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (cfg.floor * scale).max(f64::MIN_POSITIVE);
        let mut xp = x.clone();
        for i in 0..x.len() {
            xp[i] = x[i] + cfg.h;
            let fp = dot(&op.forward(&xp)?, &upstream);
            xp[i] = x[i] - cfg.h;
            let fm = dot(&op.forward(&xp)?, &upstream);
            xp[i] = x[i];
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let err = relative_error(analytic[i], numeric, floor);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_trial = trial;
                report.worst_coord = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] with the op's own sampler.
pub fn check_op(op: &dyn DiffOp, cfg: &CheckConfig) -> Result<GradReport> {
    check_gradients(op, &mut |rng| op.sample(rng), cfg)
}

/// Names declared by the differentiable modules.
pub fn declared_ops() -> Vec<&'static str> {
    [
        crate::geometry::DIFF_OPS,
        crate::splats::DIFF_OPS,
        crate::mouth_struct::DIFF_OPS,
        crate::deform_net::DIFF_OPS,
        crate::losses::DIFF_OPS,
        crate::renderer::DIFF_OPS,
    ]
    .concat()
}

/// Every checkable op, with fixed context drawn from `seed`.
pub fn registry(seed: u64) -> Vec<Box<dyn DiffOp>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        Box::new(PolarRadius),
        Box::new(PolarPhi),
        Box::new(ToGlobal::new(&mut rng)),
        Box::new(PartOffsets::new(&mut rng)),
        Box::new(DeformParams::new(&mut rng)),
        Box::new(DeformInput::new(&mut rng)),
        Box::new(RegLoss::new()),
        Box::new(RgbLoss::new(&mut rng)),
        Box::new(SsimOp::new(&mut rng)),
        Box::new(Project::new()),
        Box::new(Composite::new(5)),
        Box::new(RenderLoss::new(5, &mut rng)),
    ]
}

/// Ops whose name starts with `module.`; all ops for `None`.
pub fn registry_for(module: Option<&str>, seed: u64) -> Vec<Box<dyn DiffOp>> {
    registry(seed)
        .into_iter()
        .filter(|op| module.is_none_or(|m| op.name().split('.').next() == Some(m)))
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec3(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
        if q.iter().map(|v| v * v).sum::<f64>() > 0.25 {
            return q;
        }
    }
}

fn kink(msg: String) -> Error {
    Error::SampledAtKink(msg)
}

fn v3(x: &[f64]) -> Vec3<f64> {
    Vec3::new(x[0], x[1], x[2])
}

fn check_polar(mu: Vec3<f64>) -> Result<()> {
    let r = mu.norm();
    if r < KINK_MARGIN {
        return Err(kink(format!("radius {r:e} near the origin")));
    }
    if (mu.z / r).abs() >= POLE_LIMIT {
        return Err(kink(format!("|z/r| = {} at a pole", (mu.z / r).abs())));
    }
    Ok(())
}

fn polar_sample(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mu = normal_vec3(rng);
        if check_polar(mu).is_ok() {
            return mu.to_array().to_vec();
        }
    }
}

pub struct PolarRadius;

impl DiffOp for PolarRadius {
    fn name(&self) -> &'static str {
        "geometry.polar_radius"
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![to_polar(v3(x)).r])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok((radius_gradient(v3(x))? * u[0]).to_array().to_vec())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        polar_sample(rng)
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_polar(v3(x))
    }
}

pub struct PolarPhi;

impl DiffOp for PolarPhi {
    fn name(&self) -> &'static str {
        "geometry.polar_phi"
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![to_polar(v3(x)).phi])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok((phi_gradient(v3(x))? * u[0]).to_array().to_vec())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        polar_sample(rng)
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_polar(v3(x))
    }
}

fn flatten_global(g: &GlobalSplat<f64>) -> Vec<f64> {
    let mut out = g.mean.to_array().to_vec();
    out.extend(g.rotation.m.iter().flatten());
    out.extend(g.scale.to_array());
    out.extend(g.color.to_array());
    out.push(g.opacity);
    out
}

fn unflatten_global_grad(u: &[f64]) -> GlobalGrad<f64> {
    let mut rotation = Mat3::zero();
    for r in 0..3 {
        for c in 0..3 {
            rotation.m[r][c] = u[3 + 3 * r + c];
        }
    }
    GlobalGrad {
        mean: v3(&u[0..3]),
        rotation,
        scale: v3(&u[12..15]),
        color: v3(&u[15..18]),
        opacity: u[18],
    }
}

/// Local splat parameters to world-space attributes on a fixed face frame.
pub struct ToGlobal {
    frame: FaceFrame<f64>,
}

impl ToGlobal {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let q = Quat::from_array(random_quat(rng)).normalize();
        Self {
            frame: FaceFrame {
                rotation: q.to_mat(),
                center: normal_vec3(rng),
                scale: rng.random_range(0.2..1.0),
            },
        }
    }
}

impl DiffOp for ToGlobal {
    fn name(&self) -> &'static str {
        "splats.to_global"
    }
    fn input_dim(&self) -> usize {
        14
    }
    fn output_dim(&self) -> usize {
        19
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(flatten_global(&to_global_splat(&Splat::from_params(x), &self.frame)))
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (g, _) = to_global_backward(&Splat::from_params(x), &self.frame, &unflatten_global_grad(u));
        Ok(g.to_params().to_vec())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = (normal_vec3(rng) * 0.5).to_array().to_vec();
        x.extend(random_quat(rng));
        x.extend((normal_vec3(rng) * 0.5).to_array().map(|v| v - 1.0));
        x.extend((0..3).map(|_| rng.random::<f64>()));
        x.push(normal(rng));
        x
    }
}

/// Vertex positions as a function of the two mouth-part offsets.
pub struct PartOffsets {
    mesh: TriMesh<f64>,
    parts: MouthParts,
}

impl PartOffsets {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let vertices = (0..6).map(|_| normal_vec3(rng)).collect();
        let mesh = TriMesh::new(
            vertices,
            vec![[0, 1, 2], [3, 4, 5], [1, 2, 3]],
            vec![0, 1, 2],
            vec!["mouth_upper".into(), "mouth_lower".into(), "face".into()],
        )
        .expect("valid mesh");
        let parts = MouthParts {
            upper_part: 0,
            lower_part: 1,
            upper_vertex_ids: vec![0, 1, 2],
            lower_vertex_ids: vec![3, 4, 5],
        };
        Self { mesh, parts }
    }
}

impl DiffOp for PartOffsets {
    fn name(&self) -> &'static str {
        "mouth_struct.apply_part_offsets"
    }
    fn input_dim(&self) -> usize {
        6
    }
    fn output_dim(&self) -> usize {
        3 * self.mesh.vertices.len()
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = apply_part_offsets(&self.mesh, &self.parts, v3(&x[0..3]), v3(&x[3..6]));
        Ok(out.vertices.iter().flat_map(|v| v.to_array()).collect())
    }
    fn vjp(&self, _x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let d: Vec<Vec3<f64>> = u.chunks(3).map(v3).collect();
        let (a, b) = apply_part_offsets_backward(&self.parts, &d);
        Ok([a.to_array(), b.to_array()].concat())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..6).map(|_| normal(rng)).collect()
    }
}

fn small_net(rng: &mut ChaCha8Rng) -> DeformMLP<f64> {
    let cfg = DeformConfig {
        hidden: vec![8, 8],
        encoding: PosEncoding {
            num_freqs: 2,
            include_input: true,
        },
    };
    let mut net = DeformMLP::new(3, 1, &cfg, rng.random());
    for p in net.params_mut() {
        *p = 0.5 * normal(rng);
    }
    net
}

/// Network output as a function of its flat parameters at a fixed input.
pub struct DeformParams {
    net: DeformMLP<f64>,
    input: Vec<f64>,
}

impl DeformParams {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let net = small_net(rng);
        let input = (0..net.input_dim()).map(|_| normal(rng)).collect();
        Self { net, input }
    }
}

impl DiffOp for DeformParams {
    fn name(&self) -> &'static str {
        "deform_net.params"
    }
    fn input_dim(&self) -> usize {
        self.net.num_params()
    }
    fn output_dim(&self) -> usize {
        3
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut net = self.net.clone();
        net.params_mut().copy_from_slice(x);
        Ok(net.forward_train(&self.input)?.0.to_array().to_vec())
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut net = self.net.clone();
        net.params_mut().copy_from_slice(x);
        let (_, cache) = net.forward_train(&self.input)?;
        Ok(net.backward(&cache, v3(u)).0)
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.input_dim()).map(|_| 0.5 * normal(rng)).collect()
    }
}

/// Network output as a function of its input at fixed parameters.
pub struct DeformInput {
    net: DeformMLP<f64>,
}

impl DeformInput {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self { net: small_net(rng) }
    }
}

impl DiffOp for DeformInput {
    fn name(&self) -> &'static str {
        "deform_net.input"
    }
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn output_dim(&self) -> usize {
        3
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward_train(x)?.0.to_array().to_vec())
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.net.forward_train(x)?;
        Ok(self.net.backward(&cache, v3(u)).1)
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.input_dim()).map(|_| normal(rng)).collect()
    }
}

/// Regularizer over four splats on each of a rigid, a flexible and a mouth face.
pub struct RegLoss {
    binding: Vec<usize>,
    set_of_face: Vec<FaceSet>,
    cfg: RegConfig,
}

impl RegLoss {
    fn new() -> Self {
        Self {
            binding: (0..12).map(|i| i / 4).collect(),
            set_of_face: vec![FaceSet::Rigid, FaceSet::Flexible, FaceSet::Mouth],
            cfg: RegConfig::default(),
        }
    }

    fn set(&self, x: &[f64]) -> SplatSet<f64> {
        let splats = x
            .chunks(3)
            .map(|m| Splat {
                mu_local: v3(m),
                rot: Quat::identity(),
                log_scale: Vec3::zero(),
                color: Vec3::zero(),
                opacity_logit: 0.0,
            })
            .collect();
        SplatSet::new(splats, self.binding.clone(), self.set_of_face.len()).expect("consistent binding")
    }

    fn check_mu(&self, mu: Vec3<f64>, set: FaceSet) -> Result<()> {
        check_polar(mu)?;
        let th = &self.cfg.thresholds;
        let p = to_polar(mu);
        for (what, edge) in [("radius", th.radius_for(set)), ("gate", th.tau_r)] {
            if (p.r - edge).abs() <= KINK_MARGIN {
                return Err(kink(format!("{what}: r = {} within margin of {edge}", p.r)));
            }
        }
        let phi = effective_phi(p.phi, self.cfg.fold_phi);
        if (phi - th.tau_phi).abs() <= KINK_MARGIN {
            return Err(kink(format!("angle: phi = {phi} within margin of {}", th.tau_phi)));
        }
        if self.cfg.fold_phi && (p.phi - std::f64::consts::FRAC_PI_2).abs() <= KINK_MARGIN {
            return Err(kink(format!("fold: phi = {} at the surface plane", p.phi)));
        }
        Ok(())
    }
}

impl DiffOp for RegLoss {
    fn name(&self) -> &'static str {
        "losses.loss_reg"
    }
    fn input_dim(&self) -> usize {
        3 * self.binding.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![loss_reg(&self.set(x), &self.set_of_face, &self.cfg)?.total])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let out = loss_reg(&self.set(x), &self.set_of_face, &self.cfg)?;
        Ok(out.grads.iter().flat_map(|g| (*g * u[0]).to_array()).collect())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        for &face in &self.binding {
            let set = self.set_of_face[face];
            let r_max = 1.5 * self.cfg.thresholds.radius_for(set).max(self.cfg.thresholds.tau_r);
            loop {
                let mu = normal_vec3(rng).normalize() * rng.random_range(0.0..r_max);
                if self.check_mu(mu, set).is_ok() {
                    x.extend(mu.to_array());
                    break;
                }
            }
        }
        x
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        for (m, &face) in x.chunks(3).zip(&self.binding) {
            self.check_mu(v3(m), self.set_of_face[face])?;
        }
        Ok(())
    }
}

const LOSS_IMAGE: usize = 14;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image<f64> {
    Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).expect("valid shape")
}

fn check_l1(x: &[f64], target: &Image<f64>) -> Result<()> {
    for (i, (a, b)) in x.iter().zip(&target.data).enumerate() {
        if (a - b).abs() <= KINK_MARGIN {
            return Err(kink(format!("L1: value {i} within margin of its target")));
        }
    }
    Ok(())
}

/// Photometric loss as a function of the rendered image.
pub struct RgbLoss {
    target: Image<f64>,
}

impl RgbLoss {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            target: random_image(rng, LOSS_IMAGE, LOSS_IMAGE),
        }
    }

    fn image(&self, x: &[f64]) -> Result<Image<f64>> {
        Image::from_data(self.target.width, self.target.height, x.to_vec())
    }
}

impl DiffOp for RgbLoss {
    fn name(&self) -> &'static str {
        "losses.loss_rgb"
    }
    fn input_dim(&self) -> usize {
        self.target.data.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![loss_rgb(&self.image(x)?, &self.target, DEFAULT_LAMBDA)?.total])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let out = loss_rgb(&self.image(x)?, &self.target, DEFAULT_LAMBDA)?;
        Ok(out.grad.iter().map(|g| g * u[0]).collect())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let x = random_image(rng, self.target.width, self.target.height).data;
            if check_l1(&x, &self.target).is_ok() {
                return x;
            }
        }
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_l1(x, &self.target)
    }
}

/// Mean SSIM as a function of the first image.
pub struct SsimOp {
    reference: Image<f64>,
}

impl SsimOp {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            reference: random_image(rng, LOSS_IMAGE, LOSS_IMAGE),
        }
    }

    fn image(&self, x: &[f64]) -> Result<Image<f64>> {
        Image::from_data(self.reference.width, self.reference.height, x.to_vec())
    }
}

impl DiffOp for SsimOp {
    fn name(&self) -> &'static str {
        "losses.ssim"
    }
    fn input_dim(&self) -> usize {
        self.reference.data.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![ssim(&self.image(x)?, &self.reference)?])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = ssim_with_grad(&self.image(x)?, &self.reference)?;
        Ok(g.iter().map(|v| v * u[0]).collect())
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        // correlated with the reference, but away from x = y where the gradient vanishes
        let mix = rng.random_range(0.0..0.8);
        self.reference
            .data
            .iter()
            .map(|r| mix * r + (1.0 - mix) * rng.random::<f64>())
            .collect()
    }
}

const RENDER_SIZE: usize = 16;
/// Inputs per splat: mean, quaternion, scale, color, opacity.
const SPLAT_INPUTS: usize = 14;

fn render_camera() -> Camera<f64> {
    Camera::look_at(
        Vec3::new(0.0, 0.0, 4.0),
        Vec3::zero(),
        Vec3::new(0.0, 1.0, 0.0),
        20.0,
        RENDER_SIZE,
        RENDER_SIZE,
    )
    .expect("valid camera")
}

fn splat_from_inputs(x: &[f64]) -> GlobalSplat<f64> {
    let q = Quat::from_array([x[3], x[4], x[5], x[6]]).normalize();
    GlobalSplat {
        mean: v3(&x[0..3]),
        rotation: q.to_mat(),
        scale: v3(&x[7..10]),
        color: v3(&x[10..13]),
        opacity: x[13],
    }
}

fn splats_from_inputs(x: &[f64]) -> Vec<GlobalSplat<f64>> {
    x.chunks(SPLAT_INPUTS).map(splat_from_inputs).collect()
}

fn grad_to_inputs(x: &[f64], g: &GlobalGrad<f64>) -> Vec<f64> {
    let q = Quat::from_array([x[3], x[4], x[5], x[6]]);
    let dq = normalize4_backward(q.to_array(), q.normalize().to_mat_backward(&g.rotation));
    let mut out = g.mean.to_array().to_vec();
    out.extend(dq);
    out.extend(g.scale.to_array());
    out.extend(g.color.to_array());
    out.push(g.opacity);
    out
}

fn sample_render_splat(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    x.extend(random_quat(rng));
    x.extend((0..3).map(|_| rng.random_range(0.1..0.4)));
    x.extend((0..3).map(|_| rng.random::<f64>()));
    x.push(rng.random_range(0.2..0.9));
    x
}

/// Rejects footprint-edge pixels, near-tied depths and culled splats.
fn check_scene(splats: &[GlobalSplat<f64>], cam: &Camera<f64>) -> Result<()> {
    let mut depths = Vec::with_capacity(splats.len());
    for (i, g) in splats.iter().enumerate() {
        let p = project(g, cam).ok_or_else(|| kink(format!("splat {i} is culled")))?;
        if p.depth - cam.near <= KINK_MARGIN {
            return Err(kink(format!("splat {i} at the near plane")));
        }
        if g.opacity >= 0.99 - KINK_MARGIN {
            return Err(kink(format!("splat {i} opacity at the weight clamp")));
        }
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (m, _, _) = p.mahalanobis(x as f64, y as f64);
                if (m - FOOTPRINT_M2).abs() <= KINK_MARGIN {
                    return Err(kink(format!("splat {i} footprint edge at pixel ({x}, {y})")));
                }
            }
        }
        depths.push(p.depth);
    }
    for i in 0..depths.len() {
        for j in 0..i {
            if (depths[i] - depths[j]).abs() <= KINK_MARGIN {
                return Err(kink(format!("splats {j} and {i} tie in depth")));
            }
        }
    }
    Ok(())
}

/// Screen-space mean and conic of one splat.
pub struct Project {
    cam: Camera<f64>,
}

impl Project {
    fn new() -> Self {
        Self { cam: render_camera() }
    }
}

impl DiffOp for Project {
    fn name(&self) -> &'static str {
        "renderer.project"
    }
    fn input_dim(&self) -> usize {
        SPLAT_INPUTS
    }
    fn output_dim(&self) -> usize {
        5
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = project(&splat_from_inputs(x), &self.cam).ok_or_else(|| kink("splat is culled".into()))?;
        Ok(vec![p.mean2d[0], p.mean2d[1], p.conic[0], p.conic[1], p.conic[2]])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let sg = ScreenGrad {
            mean2d: [u[0], u[1]],
            conic: [u[2], u[3], u[4]],
            color: Vec3::zero(),
            opacity: 0.0,
        };
        let g = project_vjp(&splat_from_inputs(x), &self.cam, &sg).ok_or_else(|| kink("splat is culled".into()))?;
        Ok(grad_to_inputs(x, &g))
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let x = sample_render_splat(rng);
            if self.check_domain(&x).is_ok() {
                return x;
            }
        }
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_scene(&[splat_from_inputs(x)], &self.cam)
    }
}

/// Rendered image as a function of world-space splat attributes.
pub struct Composite {
    cam: Camera<f64>,
    count: usize,
}

impl Composite {
    fn new(count: usize) -> Self {
        Self {
            cam: render_camera(),
            count,
        }
    }
}

fn render_grads(x: &[f64], cam: &Camera<f64>, d_image: &Image<f64>) -> Result<Vec<f64>> {
    let splats = splats_from_inputs(x);
    let cache = render_with_cache(&splats, cam, &RenderSettings::default());
    let grads = render_backward(&cache, cam, d_image)?;
    Ok(x.chunks(SPLAT_INPUTS)
        .zip(&grads)
        .flat_map(|(xi, g)| grad_to_inputs(xi, g))
        .collect())
}

fn sample_scene(rng: &mut ChaCha8Rng, count: usize, ok: impl Fn(&[f64]) -> bool) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..count).flat_map(|_| sample_render_splat(rng)).collect();
        if ok(&x) {
            return x;
        }
    }
}

impl DiffOp for Composite {
    fn name(&self) -> &'static str {
        "renderer.composite"
    }
    fn input_dim(&self) -> usize {
        SPLAT_INPUTS * self.count
    }
    fn output_dim(&self) -> usize {
        3 * self.cam.width * self.cam.height
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(render_with_cache(&splats_from_inputs(x), &self.cam, &RenderSettings::default()).image.data)
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let d_image = Image::from_data(self.cam.width, self.cam.height, u.to_vec())?;
        render_grads(x, &self.cam, &d_image)
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        sample_scene(rng, self.count, |x| self.check_domain(x).is_ok())
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_scene(&splats_from_inputs(x), &self.cam)
    }
}

/// Photometric loss of a render against a fixed target.
pub struct RenderLoss {
    cam: Camera<f64>,
    count: usize,
    target: Image<f64>,
}

impl RenderLoss {
    fn new(count: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cam: render_camera(),
            count,
            target: random_image(rng, RENDER_SIZE, RENDER_SIZE),
        }
    }
}

impl DiffOp for RenderLoss {
    fn name(&self) -> &'static str {
        "renderer.render_loss"
    }
    fn input_dim(&self) -> usize {
        SPLAT_INPUTS * self.count
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let image = render_with_cache(&splats_from_inputs(x), &self.cam, &RenderSettings::default()).image;
        Ok(vec![loss_rgb(&image, &self.target, DEFAULT_LAMBDA)?.total])
    }
    fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let image = render_with_cache(&splats_from_inputs(x), &self.cam, &RenderSettings::default()).image;
        let loss = loss_rgb(&image, &self.target, DEFAULT_LAMBDA)?;
        let d_image = Image::from_data(self.cam.width, self.cam.height, loss.grad.iter().map(|g| g * u[0]).collect())?;
        render_grads(x, &self.cam, &d_image)
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        sample_scene(rng, self.count, |x| self.check_domain(x).is_ok())
    }
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        check_scene(&splats_from_inputs(x), &self.cam)?;
        let image = render_with_cache(&splats_from_inputs(x), &self.cam, &RenderSettings::default()).image;
        check_l1(&image.data, &self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        a: Vec<Vec<f64>>,
    }

    impl DiffOp for Linear {
        fn name(&self) -> &'static str {
            "test.linear"
        }
        fn input_dim(&self) -> usize {
            self.a[0].len()
        }
        fn output_dim(&self) -> usize {
            self.a.len()
        }
        fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(self.a.iter().map(|row| dot(row, x)).collect())
        }
        fn vjp(&self, _x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
            Ok((0..self.input_dim())
                .map(|j| self.a.iter().zip(u).map(|(row, ui)| row[j] * ui).sum())
                .collect())
        }
        fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            (0..self.input_dim()).map(|_| normal(rng)).collect()
        }
    }

    #[test]
    fn linear_op_is_exact() {
        let op = Linear {
            a: vec![vec![1.0, -2.0, 0.5], vec![3.0, 0.25, -1.0]],
        };
        // exact for any step, so a wide one keeps rounding small
        let cfg = CheckConfig {
            h: 1e-2,
            ..CheckConfig::default()
        };
        let r = check_op(&op, &cfg).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.to_line());
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        struct Bad;
        impl DiffOp for Bad {
            fn name(&self) -> &'static str {
                "test.bad"
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![x[0] * x[0]])
            }
            fn vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![x[0] * u[0]])
            }
            fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
                vec![rng.random_range(1.0..2.0)]
            }
        }
        let r = check_op(&Bad, &CheckConfig::default()).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kink_samples_are_rejected() {
        let op = RegLoss::new();
        let mut x = op.sample(&mut ChaCha8Rng::seed_from_u64(1));
        // put the first splat exactly on the rigid radius
        let mu = v3(&x[0..3]).normalize() * 0.1;
        x[0..3].copy_from_slice(&mu.to_array());
        let err = check_gradients(&op, &mut |_| x.clone(), &CheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SampledAtKink(_)));
        assert!(matches!(PolarPhi.check_domain(&[0.0, 0.0, 1.0]), Err(Error::SampledAtKink(_))));
    }

    #[test]
    fn registry_covers_every_declared_op() {
        let mut declared = declared_ops();
        let mut registered: Vec<&str> = registry(0).iter().map(|op| op.name()).collect();
        declared.sort_unstable();
        registered.sort_unstable();
        assert_eq!(declared, registered);
    }

    #[test]
    fn module_filter() {
        let names: Vec<_> = registry_for(Some("losses"), 0).iter().map(|o| o.name()).collect();
        assert_eq!(names, ["losses.loss_reg", "losses.loss_rgb", "losses.ssim"]);
        assert_eq!(registry_for(None, 0).len(), declared_ops().len());
    }

    #[test]
    fn quick_check_of_every_op() {
        let cfg = CheckConfig {
            trials: 3,
            ..CheckConfig::default()
        };
        for op in registry(3) {
            let r = check_op(op.as_ref(), &cfg).unwrap();
            let tol = if op.name() == "renderer.render_loss" { 1e-4 } else { 1e-5 };
            assert!(r.max_rel_error <= tol, "{}", r.to_line());
        }
    }
}
