//! Offset regularization, photometric loss, and image metrics.

use serde::{Deserialize, Serialize};

use crate::aps::FaceSet;
use crate::error::{Error, Result};
use crate::geometry::{phi_gradient, to_polar};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::scalar::Real;
use crate::splats::SplatSet;

/// Per-set radius thresholds and the angular threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegThresholds {
    pub tau_r: f64,
    pub tau_f: f64,
    pub tau_m: f64,
    pub tau_phi: f64,
}

impl Default for RegThresholds {
    fn default() -> Self {
        Self {
            tau_r: 0.1,
            tau_f: 2.0,
            tau_m: 0.1,
            tau_phi: 0.78,
        }
    }
}

impl RegThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_r && self.tau_r < self.tau_f) {
            return Err(Error::Invalid(format!(
                "need 0 < tau_r < tau_f, got {} and {}",
                self.tau_r, self.tau_f
            )));
        }
        if !(self.tau_m > 0.0) {
            return Err(Error::Invalid("tau_m must be positive".into()));
        }
        if !(self.tau_phi > 0.0 && self.tau_phi <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::Invalid(format!("tau_phi {} outside (0, pi/2]", self.tau_phi)));
        }
        Ok(())
    }

    pub fn radius_for(&self, set: FaceSet) -> f64 {
        match set {
            FaceSet::Rigid => self.tau_r,
            FaceSet::Flexible => self.tau_f,
            FaceSet::Mouth => self.tau_m,
        }
    }
}

/// Regularizer settings beyond the thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub thresholds: RegThresholds,
    /// Measure the angle to the nearer of ±normal, so splats straight below
    /// the surface are not penalized.
    pub fold_phi: bool,
    /// Divide the sum by the number of splats.
    pub mean_reduction: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            thresholds: RegThresholds::default(),
            fold_phi: true,
            mean_reduction: false,
        }
    }
}

/// `max(0, r - tau)`.
pub fn loss_p<T: Real>(r: T, tau_p: T) -> T {
    (r - tau_p).max(T::zero())
}

/// Derivative of [`loss_p`] in `r`; zero at the kink.
pub fn loss_p_grad<T: Real>(r: T, tau_p: T) -> T {
    if r > tau_p {
        T::one()
    } else {
        T::zero()
    }
}

/// Angle actually penalized: `phi` or its fold about the surface plane.
pub fn effective_phi<T: Real>(phi: T, fold: bool) -> T {
    if fold {
        phi.min(T::PI() - phi)
    } else {
        phi
    }
}

/// Angular term, active only when `r > tau_r`.
pub fn loss_angle<T: Real>(r: T, phi: T, th: &RegThresholds, fold: bool) -> T {
    if !(r > T::lit(th.tau_r)) {
        return T::zero();
    }
    (effective_phi(phi, fold) - T::lit(th.tau_phi)).max(T::zero())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegOutput<T> {
    pub total: T,
    /// Radius terms summed per set: rigid, flexible, mouth.
    pub by_set: [T; 3],
    pub angle: T,
    /// dL/dμ for every splat.
    pub grads: Vec<Vec3<T>>,
}

/// Value and gradient of the regularizer for a single local mean.
pub fn reg_term<T: Real>(mu: Vec3<T>, tau_p: T, cfg: &RegConfig) -> (T, T, Vec3<T>) {
    let th = &cfg.thresholds;
    let p = to_polar(mu);
    let lp = loss_p(p.r, tau_p);
    let mut grad = Vec3::zero();
    if loss_p_grad(p.r, tau_p) > T::zero() {
        grad += mu * (T::one() / p.r);
    }
    let la = loss_angle(p.r, p.phi, th, cfg.fold_phi);
    if la > T::zero() {
        // masked at the poles, where phi is not differentiable
        if let Ok(dphi) = phi_gradient(mu) {
            let folded = cfg.fold_phi && p.phi > T::FRAC_PI_2();
            grad += if folded { -dphi } else { dphi };
        }
    }
    (lp, la, grad)
}

/// Sum over every splat of the radius term (threshold of its face's set)
/// plus the gated angular term.
pub fn loss_reg<T: Real>(set: &SplatSet<T>, set_of_face: &[FaceSet], cfg: &RegConfig) -> Result<RegOutput<T>> {
    let th = &cfg.thresholds;
    let mut by_set = [T::zero(); 3];
    let mut angle = T::zero();
    let mut grads = Vec::with_capacity(set.len());
    for (s, &face) in set.splats.iter().zip(&set.binding) {
        let fs = *set_of_face.get(face).ok_or(Error::UnassignedFace(face))?;
        let (lp, la, g) = reg_term(s.mu_local, T::lit(th.radius_for(fs)), cfg);
        by_set[fs.index()] += lp;
        angle += la;
        grads.push(g);
    }
    let mut total = by_set[0] + by_set[1] + by_set[2] + angle;
    if cfg.mean_reduction && !set.is_empty() {
        let inv = T::one() / T::from_usize_lossy(set.len());
        total *= inv;
        by_set.iter_mut().for_each(|v| *v *= inv);
        angle *= inv;
        grads.iter_mut().for_each(|g| *g = *g * inv);
    }
    Ok(RegOutput {
        total,
        by_set,
        angle,
        grads,
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// D-SSIM weight in the photometric loss.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps<T: Real>() -> [T; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: [f64; SSIM_WINDOW] =
        std::array::from_fn(|k| (-((k as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = raw.iter().sum();
    raw.map(|v| T::lit(v / sum))
}

/// Valid-mode separable correlation of a `h × w` plane.
fn filter_valid<T: Real>(plane: &[T], w: usize, h: usize, taps: &[T; SSIM_WINDOW]) -> Vec<T> {
    let k = SSIM_WINDOW;
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut tmp = vec![T::zero(); h * wo];
    for y in 0..h {
        for x in 0..wo {
            let row = &plane[y * w + x..y * w + x + k];
            tmp[y * wo + x] = row.iter().zip(taps).fold(T::zero(), |a, (v, t)| a + *v * *t);
        }
    }
    let mut out = vec![T::zero(); ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = T::zero();
            for (a, t) in taps.iter().enumerate() {
                acc += tmp[(y + a) * wo + x] * *t;
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `ho × wo` map back to `h × w`.
fn filter_valid_transpose<T: Real>(map: &[T], w: usize, h: usize, taps: &[T; SSIM_WINDOW]) -> Vec<T> {
    let k = SSIM_WINDOW;
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut tmp = vec![T::zero(); h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = map[y * wo + x];
            for (a, t) in taps.iter().enumerate() {
                tmp[(y + a) * wo + x] += v * *t;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = tmp[y * wo + x];
            for (b, t) in taps.iter().enumerate() {
                out[y * w + x + b] += v * *t;
            }
        }
    }
    out
}

fn check_ssim_shape<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over all fully contained 11×11 windows and channels, and
/// optionally its gradient with respect to `x`.
fn ssim_impl<T: Real>(x: &Image<T>, y: &Image<T>, want_grad: bool) -> Result<(T, Option<Vec<T>>)> {
    check_ssim_shape(x, y)?;
    let (w, h) = (x.width, x.height);
    let taps = gaussian_taps::<T>();
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let n_windows = (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1);
    let norm = T::one() / T::from_usize_lossy(n_windows * 3);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); x.data.len()]);
    for c in 0..3 {
        let xp = x.channel(c);
        let yp = y.channel(c);
        let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(u, v)| *u * *v).collect::<Vec<T>>();
        let mx = filter_valid(&xp, w, h, &taps);
        let my = filter_valid(&yp, w, h, &taps);
        let exx = filter_valid(&sq(&xp, &xp), w, h, &taps);
        let eyy = filter_valid(&sq(&yp, &yp), w, h, &taps);
        let exy = filter_valid(&sq(&xp, &yp), w, h, &taps);
        let mut d_mx = vec![T::zero(); n_windows];
        let mut d_exx = vec![T::zero(); n_windows];
        let mut d_exy = vec![T::zero(); n_windows];
        for i in 0..n_windows {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = two * ux * uy + c1;
            let a2 = two * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dux = two * uy * a2 / (b1 * b2) - s * two * ux / b1;
                let ds_dsxx = -s / b2;
                let ds_dsxy = two * a1 / (b1 * b2);
                d_mx[i] = (ds_dux - two * ux * ds_dsxx - uy * ds_dsxy) * norm;
                d_exx[i] = ds_dsxx * norm;
                d_exy[i] = ds_dsxy * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mx = filter_valid_transpose(&d_mx, w, h, &taps);
            let g_exx = filter_valid_transpose(&d_exx, w, h, &taps);
            let g_exy = filter_valid_transpose(&d_exy, w, h, &taps);
            for p in 0..w * h {
                g[p * 3 + c] = g_mx[p] + two * xp[p] * g_exx[p] + yp[p] * g_exy[p];
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM and dSSIM/dx.
pub fn ssim_with_grad<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<(T, Vec<T>)> {
    let (s, g) = ssim_impl(x, y, true)?;
    Ok((s, g.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbLoss<T> {
    pub total: T,
    pub l1: T,
    pub dssim: T,
    /// dL/d(rendered) per value.
    pub grad: Vec<T>,
}

/// `(1 - λ)·L1 + λ·(1 - SSIM)/2` with its gradient in the rendered image.
pub fn loss_rgb<T: Real>(rendered: &Image<T>, target: &Image<T>, lambda: T) -> Result<RgbLoss<T>> {
    check_ssim_shape(rendered, target)?;
    let n = T::from_usize_lossy(rendered.data.len());
    let inv_n = T::one() / n;
    let mut l1 = T::zero();
    let mut grad = Vec::with_capacity(rendered.data.len());
    let w1 = (T::one() - lambda) * inv_n;
    for (a, b) in rendered.data.iter().zip(&target.data) {
        let d = *a - *b;
        l1 += d.abs();
        let sign = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        grad.push(w1 * sign);
    }
    l1 *= inv_n;
    let (s, ds) = ssim_with_grad(rendered, target)?;
    let half = T::lit(0.5);
    let dssim = (T::one() - s) * half;
    for (g, d) in grad.iter_mut().zip(ds) {
        *g -= lambda * half * d;
    }
    Ok(RgbLoss {
        total: (T::one() - lambda) * l1 + lambda * dssim,
        l1,
        dssim,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    /// `+inf` when the images are identical.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x - *y).to_f64_lossy().powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

pub fn metrics<T: Real>(rendered: &Image<T>, target: &Image<T>) -> Result<Metrics> {
    let m = mse(rendered, target)?;
    Ok(Metrics {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(rendered, target)?.to_f64_lossy(),
    })
}

/// One line per logging interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_rgb: f64,
    pub l1: f64,
    pub dssim: f64,
    pub l_reg: f64,
    pub l_p_by_set: [f64; 3],
    pub l_angle: f64,
    pub total: f64,
    /// Per-splat norm of the photometric gradient on the local mean.
    pub grad_norms: Vec<f64>,
    /// Norm of the gradient on both mouth networks' parameters.
    pub deform_grad_norm: f64,
}

impl LossReport {
    pub fn to_line(&self) -> String {
        format!(
            "step={} total={:e} l_rgb={:e} l1={:e} dssim={:e} l_reg={:e} l_p_rigid={:e} l_p_flexible={:e} l_p_mouth={:e} l_angle={:e} deform_grad={:e}",
            self.step,
            self.total,
            self.l_rgb,
            self.l1,
            self.dssim,
            self.l_reg,
            self.l_p_by_set[0],
            self.l_p_by_set[1],
            self.l_p_by_set[2],
            self.l_angle,
            self.deform_grad_norm
        )
    }
}

pub const DIFF_OPS: &[&str] = &["losses.loss_reg", "losses.loss_rgb", "losses.ssim"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Quat;
    use crate::splats::Splat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn splat_at(mu: Vec3<f64>) -> Splat<f64> {
        Splat {
            mu_local: mu,
            rot: Quat::identity(),
            log_scale: Vec3::zero(),
            color: Vec3::splat(0.5),
            opacity_logit: 0.0,
        }
    }

    #[test]
    fn loss_p_examples() {
        assert_eq!(loss_p(0.05, 0.1), 0.0);
        assert!((loss_p(0.30f64, 0.1) - 0.20).abs() < 1e-12);
        assert_eq!(loss_p(0.1, 0.1), 0.0);
        assert_eq!(loss_p_grad(0.1, 0.1), 0.0);
    }

    #[test]
    fn loss_angle_examples() {
        let th = RegThresholds::default();
        assert_eq!(loss_angle(0.05, 1.2, &th, true), 0.0);
        assert!((loss_angle(0.5f64, 0.9, &th, true) - 0.12).abs() < 1e-12);
        assert_eq!(loss_angle(0.5, 0.3, &th, true), 0.0);
        let pi = std::f64::consts::PI;
        assert_eq!(loss_angle(0.5, pi, &th, true), 0.0);
        assert!((loss_angle(0.5, pi, &th, false) - (pi - 0.78)).abs() < 1e-12);
    }

    #[test]
    fn loss_reg_examples() {
        let cfg = RegConfig::default();
        let set = SplatSet::new(vec![splat_at(Vec3::zero()); 3], vec![0, 1, 1], 2).unwrap();
        let out = loss_reg(&set, &[FaceSet::Rigid, FaceSet::Flexible], &cfg).unwrap();
        assert_eq!(out.total, 0.0);
        let set = SplatSet::new(vec![splat_at(Vec3::new(0.0, 0.0, 0.2))], vec![0], 1).unwrap();
        let out = loss_reg(&set, &[FaceSet::Rigid], &cfg).unwrap();
        assert!((out.total - 0.1).abs() < 1e-12);
        assert!((out.by_set[0] - 0.1).abs() < 1e-12);
        assert!(matches!(loss_reg(&set, &[], &cfg), Err(Error::UnassignedFace(0))));
    }

    #[test]
    fn set_swap_never_decreases() {
        let cfg = RegConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let splats: Vec<_> = (0..20)
                .map(|_| {
                    let s = rng.random_range(0.0..3.0);
                    splat_at(Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)))
                })
                .collect();
            let binding: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let set = SplatSet::new(splats, binding, 4).unwrap();
            let mut sets = vec![FaceSet::Flexible; 4];
            let before = loss_reg(&set, &sets, &cfg).unwrap().total;
            sets[rng.random_range(0..4)] = FaceSet::Rigid;
            assert!(loss_reg(&set, &sets, &cfg).unwrap().total >= before);
        }
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_data(16, 16, data).unwrap();
        let l = loss_rgb(&img, &img, 0.2).unwrap();
        assert_eq!(l.l1, 0.0);
        assert!(l.dssim.abs() < 1e-15 && l.total.abs() < 1e-15);
        let m = metrics(&img, &img).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.psnr, f64::INFINITY);
    }

    #[test]
    fn white_vs_black_l1() {
        let a = Image::filled(12, 12, Vec3::splat(1.0f64));
        let b = Image::filled(12, 12, Vec3::zero());
        assert_eq!(loss_rgb(&a, &b, 0.2).unwrap().l1, 1.0);
        assert!(loss_rgb(&a, &Image::filled(10, 12, Vec3::zero()), 0.2).is_err());
    }

    #[test]
    fn psnr_definition() {
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..20 * 20 * 3).map(|_| rng.random_range(0.0..0.9)).collect();
        let a = Image::from_data(20, 20, data.clone()).unwrap();
        let b = Image::from_data(20, 20, data.iter().map(|v| (v + 0.1).min(1.0)).collect()).unwrap();
        let m = metrics(&a, &b).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!(m.ssim < 1.0);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rnd = |n| (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        let x = Image::from_data(13, 12, rnd(13 * 12 * 3)).unwrap();
        let y = Image::from_data(13, 12, rnd(13 * 12 * 3)).unwrap();
        let (_, g) = ssim_with_grad(&x, &y).unwrap();
        let h = 1e-6;
        for k in (0..x.data.len()).step_by(7) {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data[k] += h;
            m.data[k] -= h;
            let fd = (ssim(&p, &y).unwrap() - ssim(&m, &y).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1e-4), "{k}: {fd} vs {}", g[k]);
        }
    }
}
