//! Optimization loop: all-rigid warmup, one-shot pre-allocation, then
//! training with per-set thresholds.
//!
//! Training runs in double precision on the synthetic rig.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aps::{ApsEvent, ApsStage, FaceSetAssignment};
use crate::deform_net::{DeformConfig, MlpCache, PartNets, PosEncoding};
use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::image::Image;
use crate::linalg::Vec3;
use crate::losses::{loss_reg, loss_rgb, metrics, LossReport, Metrics, RegConfig, RegThresholds, DEFAULT_LAMBDA};
use crate::mouth_struct::apply_part_offsets_in_place;
use crate::renderer::{render, render_backward, render_with_cache, Camera, RenderSettings};
use crate::rig_synth::{evaluate_rig, pose_splats, BlendRig, RigParams, Scene};
use crate::splats::{
    densify_and_prune, initialize_on_mesh, to_global_backward, to_global_splat, DensifyOptions, DensifyReport, Splat,
    SplatSet, PARAMS_PER_SPLAT,
};

/// Adam step sizes per attribute group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub means: f64,
    pub rotation: f64,
    pub scale: f64,
    pub color: f64,
    pub opacity: f64,
    pub deform: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            deform: 1e-4,
        }
    }
}

impl LearningRates {
    fn per_param(&self) -> [f64; PARAMS_PER_SPLAT] {
        let (m, r, s, c, o) = (self.means, self.rotation, self.scale, self.color, self.opacity);
        [m, m, m, r, r, r, r, s, s, s, c, c, c, o]
    }

    pub fn zero() -> Self {
        Self {
            means: 0.0,
            rotation: 0.0,
            scale: 0.0,
            color: 0.0,
            opacity: 0.0,
            deform: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub aps_step: u64,
    pub lambda: f64,
    pub thresholds: RegThresholds,
    pub fold_phi: bool,
    pub reg_mean_reduction: bool,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Densify every this many steps; 0 disables.
    pub densify_interval: u64,
    pub densify_from: u64,
    pub densify_until: u64,
    pub densify: DensifyOptions,
    /// Part-wise mouth deformation networks.
    pub deform: bool,
    pub deform_hidden: Vec<usize>,
    pub deform_freqs: usize,
    pub splats_per_face: usize,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Trailing frames held out from training.
    pub test_frames: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            aps_step: 100_000,
            lambda: DEFAULT_LAMBDA,
            thresholds: RegThresholds::default(),
            fold_phi: true,
            reg_mean_reduction: false,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            densify_interval: 0,
            densify_from: 500,
            densify_until: 15_000,
            densify: DensifyOptions::default(),
            deform: true,
            deform_hidden: vec![64, 64, 64],
            deform_freqs: 6,
            splats_per_face: 1,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 0,
            test_frames: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Small schedule that finishes in seconds on the synthetic scenes.
    pub fn desk() -> Self {
        Self {
            total_steps: 5000,
            aps_step: 2500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.aps_step && self.aps_step < self.total_steps) {
            return Err(Error::Invalid(format!(
                "aps_step must satisfy 0 < aps_step < total_steps (got aps_step={} total_steps={})",
                self.aps_step, self.total_steps
            )));
        }
        let lr = &self.lr;
        let rates = [lr.means, lr.rotation, lr.scale, lr.color, lr.opacity, lr.deform];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Invalid("every learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Invalid("lambda must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Invalid("adam decay rates must lie in [0, 1) and eps > 0".into()));
        }
        if self.splats_per_face == 0 || self.threads == 0 {
            return Err(Error::Invalid("splats_per_face and threads must be positive".into()));
        }
        self.thresholds.validate()
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            thresholds: self.thresholds,
            fold_phi: self.fold_phi,
            mean_reduction: self.reg_mean_reduction,
        }
    }

    pub fn deform_config(&self) -> DeformConfig {
        DeformConfig {
            hidden: self.deform_hidden.clone(),
            encoding: PosEncoding {
                num_freqs: self.deform_freqs,
                include_input: true,
            },
        }
    }
}

/// First and second moments of one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub splats: SplatSet<f64>,
    pub num_faces: usize,
    /// Per splat, `PARAMS_PER_SPLAT` moments each.
    pub splat_moments: Moments,
    pub nets: Option<PartNets<f64>>,
    pub net_moments: [Moments; 2],
    pub mouth_parts: Vec<usize>,
    pub assignment: FaceSetAssignment,
    pub aps: ApsStage,
    pub aps_event: Option<ApsEvent>,
    /// Accumulated photometric mean-gradient norm and sample count per splat.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, rig: &BlendRig) -> Result<Self> {
        let splats = initialize_on_mesh(&rig.base, cfg.splats_per_face)?;
        let mouth_parts: Vec<usize> = rig.mouth.as_ref().map(|m| m.part_ids().to_vec()).unwrap_or_default();
        let nets = (cfg.deform && rig.mouth.is_some())
            .then(|| PartNets::new(rig.expr_dim(), rig.pose_dim(), &cfg.deform_config(), cfg.seed));
        let net_moments = match &nets {
            Some(n) => [Moments::zeros(n.upper.num_params()), Moments::zeros(n.lower.num_params())],
            None => [Moments::zeros(0), Moments::zeros(0)],
        };
        let n = splats.len();
        Ok(Self {
            step: 0,
            num_faces: rig.base.num_faces(),
            splat_moments: Moments::zeros(n * PARAMS_PER_SPLAT),
            nets,
            net_moments,
            assignment: FaceSetAssignment::warmup(&rig.base, &mouth_parts),
            mouth_parts,
            aps: ApsStage::new(cfg.aps_step),
            aps_event: None,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            splats,
        })
    }
}

/// Frames, rig and camera the trainer reads from.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub rig: &'a BlendRig,
    pub camera: &'a Camera<f64>,
    pub params: &'a [RigParams],
    pub images: &'a [Image<f64>],
    pub background: Vec3<f64>,
}

impl<'a> TrainData<'a> {
    pub fn from_scene(scene: &'a Scene) -> Self {
        Self {
            rig: &scene.rig,
            camera: &scene.camera,
            params: &scene.params,
            images: &scene.images,
            background: Vec3::from_array(scene.spec.background),
        }
    }

    pub fn settings(&self) -> RenderSettings<f64> {
        RenderSettings {
            background: self.background,
            full_frame_boxes: false,
        }
    }

    fn validate(&self, test_frames: usize) -> Result<usize> {
        if self.params.len() != self.images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter records for {} frames",
                self.params.len(),
                self.images.len()
            )));
        }
        if test_frames >= self.images.len() {
            return Err(Error::Invalid(format!(
                "test_frames={} leaves no training frames out of {}",
                test_frames,
                self.images.len()
            )));
        }
        Ok(self.images.len() - test_frames)
    }
}

/// Frame used at `step`: epochs visit every training frame once in a
/// seed-determined order.
pub fn frame_for_step(seed: u64, step: u64, n_train: usize) -> usize {
    let n = n_train as u64;
    let epoch = step / n;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order[(step % n) as usize]
}

/// Mouth-part offsets predicted by the networks, with caches when training.
fn mouth_offsets(
    nets: &PartNets<f64>,
    params: &RigParams,
    t: f64,
) -> Result<((Vec3<f64>, MlpCache<f64>), (Vec3<f64>, MlpCache<f64>))> {
    let x = nets.upper.assemble_input(&params.expr, &params.pose, t)?;
    Ok((nets.upper.forward_train(&x)?, nets.lower.forward_train(&x)?))
}

/// Posed mesh with network offsets; `t = None` is inference (timestep pinned to 0).
pub fn posed_for_state(state: &TrainState, rig: &BlendRig, params: &RigParams, t: Option<f64>) -> Result<TriMesh<f64>> {
    let mut mesh = evaluate_rig(rig, params)?;
    if let (Some(nets), Some(parts)) = (&state.nets, &rig.mouth) {
        let (u, l) = match t {
            Some(t) => {
                let ((u, _), (l, _)) = mouth_offsets(nets, params, t)?;
                (u, l)
            }
            None => (
                nets.upper.forward_inference(&params.expr, &params.pose)?,
                nets.lower.forward_inference(&params.expr, &params.pose)?,
            ),
        };
        apply_part_offsets_in_place(&mut mesh, parts, u, l);
    }
    Ok(mesh)
}

/// Inference render of one frame.
pub fn render_state(
    state: &TrainState,
    rig: &BlendRig,
    params: &RigParams,
    camera: &Camera<f64>,
    settings: &RenderSettings<f64>,
) -> Result<Image<f64>> {
    let mesh = posed_for_state(state, rig, params, None)?;
    Ok(render(&pose_splats(&mesh, &state.splats)?, camera, settings))
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    mom: &mut Moments,
    lr: &dyn Fn(usize) -> f64,
    cfg: &TrainConfig,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let rate = lr(i);
        if rate != 0.0 {
            params[i] -= rate * (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + cfg.eps);
        }
    }
}

fn non_finite_detail(state: &TrainState, report: &LossReport) -> String {
    let bad = state
        .splats
        .splats
        .iter()
        .filter(|s| !s.to_params().iter().all(|v| v.is_finite()))
        .count();
    format!(
        "l_rgb={} l_reg={} total={} non_finite_splats={bad} of {}",
        report.l_rgb,
        report.l_reg,
        report.total,
        state.splats.len()
    )
}

/// One optimization step on one frame.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    frame: usize,
) -> Result<LossReport> {
    let rig = data.rig;
    if state.aps.is_due(state.step) {
        let (assignment, event) = state.aps.run(state.step, &state.splats, &rig.base, &state.mouth_parts)?;
        state.assignment = assignment;
        state.aps_event = Some(event);
    }
    let params = &data.params[frame];
    let target = &data.images[frame];

    let mut mesh = evaluate_rig(rig, params)?;
    let mut caches = None;
    if let (Some(nets), Some(parts)) = (&state.nets, &rig.mouth) {
        let ((u, cu), (l, cl)) = mouth_offsets(nets, params, params.t)?;
        apply_part_offsets_in_place(&mut mesh, parts, u, l);
        caches = Some((cu, cl));
    }
    let frames = mesh.face_frames()?;
    let globals: Vec<_> = state
        .splats
        .splats
        .iter()
        .zip(&state.splats.binding)
        .map(|(s, &f)| to_global_splat(s, &frames[f]))
        .collect();
    let settings = data.settings();
    let cache = render_with_cache(&globals, data.camera, &settings);
    let rgb = loss_rgb(&cache.image, target, cfg.lambda)?;
    let d_image = Image::from_data(cache.image.width, cache.image.height, rgb.grad.clone())?;
    let global_grads = render_backward(&cache, data.camera, &d_image)?;
    let reg = loss_reg(&state.splats, &state.assignment.set_of_face, &cfg.reg_config())?;

    let n = state.splats.len();
    let mut grads = vec![0.0; n * PARAMS_PER_SPLAT];
    let mut grad_norms = Vec::with_capacity(n);
    let mut d_upper = Vec3::zero();
    let mut d_lower = Vec3::zero();
    let mouth = rig.mouth.as_ref();
    for i in 0..n {
        let face = state.splats.binding[i];
        let (mut g, d_center) = to_global_backward(&state.splats.splats[i], &frames[face], &global_grads[i]);
        grad_norms.push(g.mu_local.norm());
        g.mu_local += reg.grads[i];
        grads[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT].copy_from_slice(&g.to_params());
        if let Some(m) = mouth {
            let part = mesh.part_of_face[face];
            if part == m.upper_part {
                d_upper += d_center;
            } else if part == m.lower_part {
                d_lower += d_center;
            }
        }
    }

    let report = LossReport {
        step: state.step,
        l_rgb: rgb.total,
        l1: rgb.l1,
        dssim: rgb.dssim,
        l_reg: reg.total,
        l_p_by_set: reg.by_set,
        l_angle: reg.angle,
        total: rgb.total + reg.total,
        grad_norms,
        deform_grad_norm: 0.0,
    };
    if !report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: non_finite_detail(state, &report),
        });
    }
    let mut report = report;

    let t = state.step + 1;
    let per_param = cfg.lr.per_param();
    let mut flat: Vec<f64> = state.splats.splats.iter().flat_map(|s| s.to_params()).collect();
    adam_update(&mut flat, &grads, &mut state.splat_moments, &|i| per_param[i % PARAMS_PER_SPLAT], cfg, t);
    for (i, s) in state.splats.splats.iter_mut().enumerate() {
        let mut next = Splat::from_params(&flat[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT]);
        if cfg.lr.rotation != 0.0 {
            next.rot = next.rot.normalize();
        }
        if cfg.lr.color != 0.0 {
            next.color = next.color.map(|c| c.clamp(0.0, 1.0));
        }
        *s = next;
    }

    if let (Some(nets), Some((cu, cl))) = (state.nets.as_mut(), caches) {
        let (gu, _) = nets.upper.backward(&cu, d_upper);
        let (gl, _) = nets.lower.backward(&cl, d_lower);
        report.deform_grad_norm = gu.iter().chain(&gl).map(|g| g * g).sum::<f64>().sqrt();
        let rate = cfg.lr.deform;
        adam_update(nets.upper.params_mut(), &gu, &mut state.net_moments[0], &|_| rate, cfg, t);
        adam_update(nets.lower.params_mut(), &gl, &mut state.net_moments[1], &|_| rate, cfg, t);
    }

    for (i, g) in report.grad_norms.iter().enumerate() {
        state.grad_accum[i] += g;
        state.grad_count[i] += 1;
    }
    state.step += 1;

    if cfg.densify_interval > 0
        && state.step % cfg.densify_interval == 0
        && state.step >= cfg.densify_from
        && state.step < cfg.densify_until
    {
        densify(state, cfg)?;
    }
    Ok(report)
}

fn densify(state: &mut TrainState, cfg: &TrainConfig) -> Result<DensifyReport> {
    let avg: Vec<f64> = state
        .grad_accum
        .iter()
        .zip(&state.grad_count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let seed = cfg.seed ^ state.step.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let (splats, report) = densify_and_prune(&state.splats, &avg, &cfg.densify, seed)?;
    state.splats = splats;
    let old = std::mem::replace(&mut state.splat_moments, Moments::zeros(0));
    let mut moments = Moments::zeros(report.origin.len() * PARAMS_PER_SPLAT);
    for (i, &o) in report.origin.iter().enumerate() {
        let (dst, src) = (i * PARAMS_PER_SPLAT, o * PARAMS_PER_SPLAT);
        moments.m[dst..dst + PARAMS_PER_SPLAT].copy_from_slice(&old.m[src..src + PARAMS_PER_SPLAT]);
        moments.v[dst..dst + PARAMS_PER_SPLAT].copy_from_slice(&old.v[src..src + PARAMS_PER_SPLAT]);
    }
    state.splat_moments = moments;
    state.grad_accum = vec![0.0; report.origin.len()];
    state.grad_count = vec![0; report.origin.len()];
    Ok(report)
}

/// Mean of per-frame metrics.
pub fn evaluate_frames(
    state: &TrainState,
    data: &TrainData<'_>,
    frames: std::ops::Range<usize>,
) -> Result<Metrics> {
    let settings = data.settings();
    let n = frames.len().max(1) as f64;
    let mut acc = Metrics {
        mse: 0.0,
        psnr: 0.0,
        ssim: 0.0,
    };
    for f in frames {
        let img = render_state(state, data.rig, &data.params[f], data.camera, &settings)?;
        let m = metrics(&img, &data.images[f])?;
        acc.mse += m.mse / n;
        acc.psnr += m.psnr / n;
        acc.ssim += m.ssim / n;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub report: LossReport,
    pub test: Option<Metrics>,
}

impl HistoryRecord {
    pub fn to_line(&self) -> String {
        let mut line = self.report.to_line();
        if let Some(m) = &self.test {
            line.push_str(&format!(" test_mse={:e} test_psnr={:.4} test_ssim={:.6}", m.mse, m.psnr, m.ssim));
        }
        line
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: TrainState,
    pub history: Vec<HistoryRecord>,
    pub train_metrics: Metrics,
    pub test_metrics: Option<Metrics>,
}

pub fn fit(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<FitResult> {
    fit_with(cfg, data, None, |_| Ok(()))
}

/// Runs (or resumes) training to `total_steps`, calling `checkpoint` every
/// `checkpoint_interval` steps and once at the end.
pub fn fit_with(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    resume: Option<TrainState>,
    mut checkpoint: impl FnMut(&TrainState) -> Result<()> + Send,
) -> Result<FitResult> {
    cfg.validate()?;
    let n_train = data.validate(cfg.test_frames)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut state = match resume {
            Some(s) => s,
            None => TrainState::new(cfg, data.rig)?,
        };
        let test_range = n_train..data.images.len();
        let mut history = Vec::new();
        while state.step < cfg.total_steps {
            let frame = frame_for_step(cfg.seed, state.step, n_train);
            let report = train_step(&mut state, data, cfg, frame)?;
            if cfg.log_interval > 0 && state.step % cfg.log_interval == 0 {
                let test = if test_range.is_empty() {
                    None
                } else {
                    Some(evaluate_frames(&state, data, test_range.clone())?)
                };
                history.push(HistoryRecord { report, test });
            }
            if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
                checkpoint(&state)?;
            }
        }
        checkpoint(&state)?;
        let train_metrics = evaluate_frames(&state, data, 0..n_train)?;
        let test_metrics = if test_range.is_empty() {
            None
        } else {
            Some(evaluate_frames(&state, data, test_range)?)
        };
        Ok(FitResult {
            state,
            history,
            train_metrics,
            test_metrics,
        })
    })
}

/// Renders a parameter sequence with the trained state; no optimization.
pub fn animate(
    state: &TrainState,
    rig: &BlendRig,
    params: &[RigParams],
    camera: &Camera<f64>,
    settings: &RenderSettings<f64>,
) -> Result<Vec<Image<f64>>> {
    if state.num_faces != rig.base.num_faces() || state.splats.binding.iter().any(|&f| f >= rig.base.num_faces()) {
        return Err(Error::BadCheckpoint(format!(
            "checkpoint binds {} faces, rig has {}",
            state.num_faces,
            rig.base.num_faces()
        )));
    }
    params.iter().map(|p| render_state(state, rig, p, camera, settings)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aps::FaceSet;
    use crate::rig_synth::{generate_scene, SceneSpec};

    fn small_scene(frames: usize) -> Scene {
        generate_scene(
            &SceneSpec {
                width: 32,
                height: 32,
                focal: 45.0,
                frames,
                ..SceneSpec::smoke()
            },
            3,
        )
        .unwrap()
    }

    fn cfg(total: u64, aps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            aps_step: aps,
            log_interval: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = cfg(100, 100);
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("aps_step"));
        let mut z = cfg(100, 50);
        z.lr.color = 0.0;
        assert!(z.validate().is_err());
    }

    #[test]
    fn frame_order_is_a_permutation_per_epoch() {
        let mut seen: Vec<usize> = (0..7).map(|s| frame_for_step(9, s, 7)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(frame_for_step(9, 12, 7), frame_for_step(9, 12, 7));
    }

    #[test]
    fn zero_learning_rates_keep_state() {
        let scene = small_scene(2);
        let data = TrainData::from_scene(&scene);
        let mut c = cfg(10, 5);
        c.lr = LearningRates::zero();
        let mut state = TrainState::new(&c, &scene.rig).unwrap();
        let before = state.splats.clone();
        let report = train_step(&mut state, &data, &c, 0).unwrap();
        assert_eq!(state.splats, before);
        assert!(report.total > 0.0);
        assert_eq!(report.total, report.l_rgb + report.l_reg);
    }

    #[test]
    fn aps_runs_once_even_at_last_step() {
        let scene = small_scene(3);
        let data = TrainData::from_scene(&scene);
        let c = cfg(6, 5);
        let r = fit(&c, &data).unwrap();
        assert_eq!(r.state.aps.ran_at, Some(5));
        assert!(r.state.aps_event.is_some());
        assert_eq!(r.state.step, 6);
        assert!(r.state.assignment.tau_part.is_some());
    }

    #[test]
    fn warmup_assignment_is_rigid() {
        let scene = small_scene(2);
        let c = cfg(10, 5);
        let state = TrainState::new(&c, &scene.rig).unwrap();
        assert!(state.assignment.set_of_face.iter().all(|s| *s == FaceSet::Rigid));
    }

    #[test]
    fn same_seed_same_result() {
        let scene = small_scene(3);
        let data = TrainData::from_scene(&scene);
        let c = cfg(20, 10);
        let a = fit(&c, &data).unwrap();
        let b = fit(&c, &data).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn loss_decreases_on_static_frame() {
        let scene = small_scene(1);
        let data = TrainData::from_scene(&scene);
        let c = cfg(300, 299);
        let mut state = TrainState::new(&c, &scene.rig).unwrap();
        let first = train_step(&mut state, &data, &c, 0).unwrap().total;
        let mut last = first;
        for _ in 1..300 {
            last = train_step(&mut state, &data, &c, 0).unwrap().total;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
