//! Software splat rasterizer with an exact adjoint.
//!
//! Splats are projected with a local affine (EWA) approximation, sorted
//! front to back and alpha-composited per pixel. A splat only touches pixels
//! inside its 3-sigma ellipse; the bounding box is that ellipse's box, so
//! culling never changes the image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;
use crate::splats::{GlobalGrad, GlobalSplat};

pub const DEFAULT_NEAR: f64 = 1e-3;
/// Isotropic screen-space dilation in px².
pub const DILATION: f64 = 0.3;
pub const MAX_WEIGHT: f64 = 0.99;
/// Squared Mahalanobis radius of the footprint.
pub const FOOTPRINT_M2: f64 = 9.0;
pub const TILE: usize = 8;

pub const DIFF_OPS: &[&str] = &["renderer.project", "renderer.composite", "renderer.render_loss"];

/// Pinhole camera. Pixel `(i, j)` has its center at `u = i, v = j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation; camera looks down +z with y pointing down.
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
    pub near: T,
}

impl<T: Real> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near: T::lit(DEFAULT_NEAR),
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: usize, height: usize) -> Result<Self> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(up);
        if right.norm() < T::lit(1e-9) {
            return Err(Error::DegenerateAxis);
        }
        let right = right.normalize();
        let down = fwd.cross(right);
        let rotation = Mat3::from_cols(right, down, fwd).transpose();
        let translation = -rotation.mul_vec(eye);
        let half = |n: usize| T::from_usize_lossy(n - 1) * T::lit(0.5);
        Self::new(focal, focal, half(width), half(height), rotation, translation, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image dimensions must be positive".into()));
        }
        if !(self.near > T::zero()) {
            return Err(Error::Invalid("near plane must be positive".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: self.rotation.cast(),
            translation: self.translation.cast(),
            width: self.width,
            height: self.height,
            near: c(self.near),
        }
    }
}

/// Screen-space footprint of one splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected<T> {
    pub mean2d: [T; 2],
    /// `[a, b, c]` of the symmetric matrix `[[a, b], [b, c]]`, dilation included.
    pub cov2d: [T; 3],
    pub conic: [T; 3],
    pub depth: T,
    pub p_cam: Vec3<T>,
    /// Inclusive pixel box `[x0, y0, x1, y1]`, clipped to the image; empty if x0 > x1.
    pub bbox: [i64; 4],
}

impl<T: Real> Projected<T> {
    pub fn bbox_is_empty(&self) -> bool {
        self.bbox[0] > self.bbox[2] || self.bbox[1] > self.bbox[3]
    }

    /// Squared Mahalanobis distance of pixel `(x, y)` from the mean.
    #[inline]
    pub fn mahalanobis(&self, x: T, y: T) -> (T, T, T) {
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        let [a, b, c] = self.conic;
        (a * dx * dx + T::lit(2.0) * b * dx * dy + c * dy * dy, dx, dy)
    }
}

fn projection_jacobian<T: Real>(cam: &Camera<T>, p: Vec3<T>) -> [[T; 3]; 2] {
    let iz = T::one() / p.z;
    [
        [cam.fx * iz, T::zero(), -cam.fx * p.x * iz * iz],
        [T::zero(), cam.fy * iz, -cam.fy * p.y * iz * iz],
    ]
}

/// World covariance `R diag(s²) Rᵀ`.
pub fn world_covariance<T: Real>(g: &GlobalSplat<T>) -> Mat3<T> {
    let m = g.rotation.matmul(&Mat3::from_diag(g.scale));
    m.matmul(&m.transpose())
}

/// Pre-dilation screen covariance `J W Σ Wᵀ Jᵀ`.
fn raw_cov2d<T: Real>(cam: &Camera<T>, g: &GlobalSplat<T>, p: Vec3<T>) -> [T; 3] {
    let v = cam.rotation.matmul(&world_covariance(g)).matmul(&cam.rotation.transpose());
    let j = projection_jacobian(cam, p);
    let mut jv = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jv[r][c] = (0..3).map(|k| j[r][k] * v.m[k][c]).sum();
        }
    }
    let e = |r: usize, s: usize| -> T { (0..3).map(|k| jv[r][k] * j[s][k]).sum() };
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// Projection without dilation; `None` behind the near plane.
pub fn project_undilated<T: Real>(g: &GlobalSplat<T>, cam: &Camera<T>) -> Option<([T; 2], [T; 3], T)> {
    let p = cam.to_camera(g.mean);
    if p.z <= cam.near {
        return None;
    }
    let mean2d = [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy];
    Some((mean2d, raw_cov2d(cam, g, p), p.z))
}

/// Projects one splat. Splats at or behind the near plane are culled (`None`).
pub fn project<T: Real>(g: &GlobalSplat<T>, cam: &Camera<T>) -> Option<Projected<T>> {
    let (mean2d, raw, depth) = project_undilated(g, cam)?;
    let dil = T::lit(DILATION);
    let cov2d = [raw[0] + dil, raw[1], raw[2] + dil];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    // The ellipse dᵀ Σ⁻¹ d ≤ k has half-widths sqrt(k Σ_xx), sqrt(k Σ_yy).
    // One extra pixel absorbs rounding in the extent; the exact test runs per pixel.
    let k = T::lit(FOOTPRINT_M2);
    let ex = (k * cov2d[0]).sqrt();
    let ey = (k * cov2d[2]).sqrt();
    let lo = |m: T, e: T| (m - e).floor().to_f64_lossy() as i64 - 1;
    let hi = |m: T, e: T| (m + e).ceil().to_f64_lossy() as i64 + 1;
    let bbox = [
        lo(mean2d[0], ex).max(0),
        lo(mean2d[1], ey).max(0),
        hi(mean2d[0], ex).min(cam.width as i64 - 1),
        hi(mean2d[1], ey).min(cam.height as i64 - 1),
    ];
    Some(Projected {
        mean2d,
        cov2d,
        conic,
        depth,
        p_cam: cam.to_camera(g.mean),
        bbox,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings<T> {
    pub background: Vec3<T>,
    /// Treat every footprint box as the full image (culling-soundness check).
    pub full_frame_boxes: bool,
}

impl<T: Real> Default for RenderSettings<T> {
    fn default() -> Self {
        Self {
            background: Vec3::zero(),
            full_frame_boxes: false,
        }
    }
}

/// Per-splat screen-space gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad<T> {
    pub mean2d: [T; 2],
    /// dL/d(a, b, c) of the conic, `b` counted once.
    pub conic: [T; 3],
    pub color: Vec3<T>,
    pub opacity: T,
}

impl<T: Real> ScreenGrad<T> {
    fn accumulate(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.color += o.color;
        self.opacity += o.opacity;
    }
}

/// Forward products needed by the adjoint.
#[derive(Clone, Debug)]
pub struct RenderCache<T> {
    pub splats: Vec<GlobalSplat<T>>,
    pub projected: Vec<Option<Projected<T>>>,
    /// Splat indices, front to back.
    pub order: Vec<usize>,
    tiles: Vec<Vec<usize>>,
    pub image: Image<T>,
}

/// Stable front-to-back order; equal depths keep index order.
pub fn depth_order<T: Real>(projected: &[Option<Projected<T>>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = projected[a].as_ref().map(|p| p.depth).unwrap_or(T::zero());
        let db = projected[b].as_ref().map(|p| p.depth).unwrap_or(T::zero());
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn tiles_dims(cam_w: usize, cam_h: usize) -> (usize, usize) {
    (cam_w.div_ceil(TILE), cam_h.div_ceil(TILE))
}

fn bin_tiles<T: Real>(
    projected: &mut [Option<Projected<T>>],
    order: &[usize],
    cam: &Camera<T>,
    full_frame: bool,
) -> Vec<Vec<usize>> {
    let (tw, th) = tiles_dims(cam.width, cam.height);
    let mut tiles = vec![Vec::new(); tw * th];
    for &i in order {
        let Some(p) = projected[i].as_mut() else { continue };
        if full_frame {
            p.bbox = [0, 0, cam.width as i64 - 1, cam.height as i64 - 1];
        }
        if p.bbox_is_empty() {
            continue;
        }
        let [x0, y0, x1, y1] = p.bbox.map(|v| v as usize);
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tw + tx].push(i);
            }
        }
    }
    tiles
}

/// Blend weight at a pixel: `(w, gaussian, clamped)`, or `None` outside the footprint.
#[inline]
fn weight_at<T: Real>(p: &Projected<T>, opacity: T, x: usize, y: usize) -> Option<(T, T, T, T, bool)> {
    let (m, dx, dy) = p.mahalanobis(T::from_usize_lossy(x), T::from_usize_lossy(y));
    if !(m <= T::lit(FOOTPRINT_M2)) {
        return None;
    }
    let g = (T::lit(-0.5) * m).exp();
    let raw = opacity * g;
    let cap = T::lit(MAX_WEIGHT);
    if raw > cap {
        Some((cap, g, dx, dy, true))
    } else {
        Some((raw, g, dx, dy, false))
    }
}

/// Pixel rectangle of one tile; local pixel index `k = (y - y0) * TILE + (x - x0)`.
#[derive(Clone, Copy)]
struct TileRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl TileRect {
    fn new(tile: usize, tw: usize, cam_w: usize, cam_h: usize) -> Self {
        let (tx, ty) = (tile % tw, tile / tw);
        Self {
            x0: tx * TILE,
            y0: ty * TILE,
            x1: ((tx + 1) * TILE).min(cam_w),
            y1: ((ty + 1) * TILE).min(cam_h),
        }
    }

    fn pixels(self) -> impl Iterator<Item = (usize, usize, usize)> {
        (self.y0..self.y1)
            .flat_map(move |y| (self.x0..self.x1).map(move |x| ((y - self.y0) * TILE + x - self.x0, x, y)))
    }

    /// Visits the tile pixels inside the splat's box.
    #[inline]
    fn for_each_in<T: Real>(self, p: &Projected<T>, mut f: impl FnMut(usize, usize, usize)) {
        let xa = (p.bbox[0].max(0) as usize).max(self.x0);
        let xb = ((p.bbox[2] + 1).max(0) as usize).min(self.x1);
        let ya = (p.bbox[1].max(0) as usize).max(self.y0);
        let yb = ((p.bbox[3] + 1).max(0) as usize).min(self.y1);
        for y in ya..yb {
            for x in xa..xb {
                f((y - self.y0) * TILE + x - self.x0, x, y);
            }
        }
    }
}

/// Renders splats and keeps what the adjoint needs.
pub fn render_with_cache<T: Real>(
    splats: &[GlobalSplat<T>],
    cam: &Camera<T>,
    settings: &RenderSettings<T>,
) -> RenderCache<T> {
    let mut projected: Vec<Option<Projected<T>>> = splats.par_iter().map(|g| project(g, cam)).collect();
    let order = depth_order(&projected);
    let tiles = bin_tiles(&mut projected, &order, cam, settings.full_frame_boxes);
    let (tw, _) = tiles_dims(cam.width, cam.height);
    let bg = settings.background;
    let tile_out: Vec<Vec<(usize, usize, Vec3<T>)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let r = TileRect::new(t, tw, cam.width, cam.height);
            let mut trans = [T::one(); TILE * TILE];
            let mut color = [Vec3::zero(); TILE * TILE];
            for &i in list {
                let p = projected[i].as_ref().expect("binned splats are projected");
                let s = &splats[i];
                r.for_each_in(p, |k, x, y| {
                    if let Some((w, ..)) = weight_at(p, s.opacity, x, y) {
                        color[k] += s.color * (w * trans[k]);
                        trans[k] *= T::one() - w;
                    }
                });
            }
            r.pixels().map(|(k, x, y)| (x, y, color[k] + bg * trans[k])).collect()
        })
        .collect();
    let mut image = Image::new(cam.width, cam.height);
    for tile in tile_out {
        for (x, y, c) in tile {
            image.set_pixel(x, y, c);
        }
    }
    RenderCache {
        splats: splats.to_vec(),
        projected,
        order,
        tiles,
        image,
    }
}

pub fn render<T: Real>(splats: &[GlobalSplat<T>], cam: &Camera<T>, settings: &RenderSettings<T>) -> Image<T> {
    render_with_cache(splats, cam, settings).image
}

/// Screen-space adjoint of compositing, reduced per splat in tile order.
fn composite_backward<T: Real>(cache: &RenderCache<T>, cam: &Camera<T>, d_image: &Image<T>) -> Vec<ScreenGrad<T>> {
    let (tw, _) = tiles_dims(cam.width, cam.height);
    let splats = &cache.splats;
    let partials: Vec<Vec<ScreenGrad<T>>> = cache
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let r = TileRect::new(t, tw, cam.width, cam.height);
            let mut trans = [T::one(); TILE * TILE];
            let mut before = [Vec3::zero(); TILE * TILE];
            let mut upstream = [Vec3::zero(); TILE * TILE];
            let mut total = [Vec3::zero(); TILE * TILE];
            for (k, x, y) in r.pixels() {
                upstream[k] = d_image.pixel(x, y);
                total[k] = cache.image.pixel(x, y);
            }
            let two = T::lit(2.0);
            for (j, &i) in list.iter().enumerate() {
                let p = cache.projected[i].as_ref().expect("binned splats are projected");
                let s = &splats[i];
                let a = &mut acc[j];
                r.for_each_in(p, |k, x, y| {
                    let Some((w, g, dx, dy, clamped)) = weight_at(p, s.opacity, x, y) else {
                        return;
                    };
                    let dc = upstream[k];
                    let own = s.color * (w * trans[k]);
                    let one_minus = T::one() - w;
                    if dc != Vec3::zero() {
                        let after = total[k] - before[k] - own;
                        let dw = (s.color * trans[k] - after * (T::one() / one_minus)).dot(dc);
                        a.color += dc * (w * trans[k]);
                        if !clamped {
                            a.opacity += dw * g;
                            let dm = dw * w * T::lit(-0.5);
                            let [ca, cb, cc] = p.conic;
                            a.mean2d[0] -= dm * two * (ca * dx + cb * dy);
                            a.mean2d[1] -= dm * two * (cb * dx + cc * dy);
                            a.conic[0] += dm * dx * dx;
                            a.conic[1] += dm * two * dx * dy;
                            a.conic[2] += dm * dy * dy;
                        }
                    }
                    before[k] += own;
                    trans[k] *= one_minus;
                });
            }
            acc
        })
        .collect();
    let mut out = vec![ScreenGrad::default(); splats.len()];
    for (list, acc) in cache.tiles.iter().zip(&partials) {
        for (&i, g) in list.iter().zip(acc) {
            out[i].accumulate(g);
        }
    }
    out
}

/// Adjoint of [`project`]; `None` when the splat is culled.
pub fn project_vjp<T: Real>(g: &GlobalSplat<T>, cam: &Camera<T>, sg: &ScreenGrad<T>) -> Option<GlobalGrad<T>> {
    project(g, cam).map(|p| project_backward(g, &p, cam, sg))
}

/// Adjoint of [`project`] followed by the activated attributes.
fn project_backward<T: Real>(g: &GlobalSplat<T>, p: &Projected<T>, cam: &Camera<T>, sg: &ScreenGrad<T>) -> GlobalGrad<T> {
    let two = T::lit(2.0);
    // Conic → covariance: dL/dΣ₂ = -Q G Q with G the symmetric conic gradient.
    let [qa, qb, qc] = p.conic;
    let gq = [[sg.conic[0], sg.conic[1] / two], [sg.conic[1] / two, sg.conic[2]]];
    let q = [[qa, qb], [qb, qc]];
    let mut qg = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            qg[r][c] = q[r][0] * gq[0][c] + q[r][1] * gq[1][c];
        }
    }
    let mut gc = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            gc[r][c] = -(qg[r][0] * q[0][c] + qg[r][1] * q[1][c]);
        }
    }

    let pc = p.p_cam;
    let j = projection_jacobian(cam, pc);
    let w = cam.rotation;
    let v = w.matmul(&world_covariance(g)).matmul(&w.transpose());

    // dL/dV = Jᵀ Gc J ; dL/dJ = 2 Gc J V.
    let mut dv = Mat3::zero();
    for a in 0..3 {
        for b in 0..3 {
            let mut s = T::zero();
            for r in 0..2 {
                for c in 0..2 {
                    s += j[r][a] * gc[r][c] * j[c][b];
                }
            }
            dv.m[a][b] = s;
        }
    }
    let mut dj = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let mut s = T::zero();
            for k in 0..2 {
                let jv: T = (0..3).map(|l| j[k][l] * v.m[l][c]).sum();
                s += gc[r][k] * jv;
            }
            dj[r][c] = two * s;
        }
    }

    let iz = T::one() / pc.z;
    let iz2 = iz * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let [gu, gv] = sg.mean2d;
    let mut dp = Vec3::new(gu * fx * iz, gv * fy * iz, -(gu * fx * pc.x + gv * fy * pc.y) * iz2);
    dp.x += dj[0][2] * (-fx * iz2);
    dp.y += dj[1][2] * (-fy * iz2);
    dp.z += dj[0][0] * (-fx * iz2)
        + dj[0][2] * (two * fx * pc.x * iz2 * iz)
        + dj[1][1] * (-fy * iz2)
        + dj[1][2] * (two * fy * pc.y * iz2 * iz);
    let mean = w.transpose().mul_vec(dp);

    // Σ = M Mᵀ with M = R diag(s).
    let dsigma = w.transpose().matmul(&dv).matmul(&w);
    let m = g.rotation.matmul(&Mat3::from_diag(g.scale));
    let dm = dsigma.add(&dsigma.transpose()).matmul(&m);
    let mut rotation = Mat3::zero();
    let mut scale = Vec3::zero();
    for r in 0..3 {
        for c in 0..3 {
            rotation.m[r][c] = dm.m[r][c] * g.scale[c];
            scale[c] += dm.m[r][c] * g.rotation.m[r][c];
        }
    }
    GlobalGrad {
        mean,
        rotation,
        scale,
        color: sg.color,
        opacity: sg.opacity,
    }
}

/// Gradients of a scalar loss with respect to every world-space splat,
/// given dL/d(image). Culled splats receive zero.
pub fn render_backward<T: Real>(cache: &RenderCache<T>, cam: &Camera<T>, d_image: &Image<T>) -> Result<Vec<GlobalGrad<T>>> {
    cache.image.same_shape(d_image)?;
    let screen = composite_backward(cache, cam, d_image);
    Ok(cache
        .splats
        .par_iter()
        .zip(cache.projected.par_iter())
        .zip(screen.par_iter())
        .map(|((g, p), sg)| match p {
            Some(p) => project_backward(g, p, cam, sg),
            None => GlobalGrad::default(),
        })
        .collect())
}

/// Stateful wrapper: `forward` caches, `backward` consumes the cache.
#[derive(Clone, Debug)]
pub struct Rasterizer<T> {
    pub camera: Camera<T>,
    pub settings: RenderSettings<T>,
    cache: Option<RenderCache<T>>,
}

impl<T: Real> Rasterizer<T> {
    pub fn new(camera: Camera<T>, settings: RenderSettings<T>) -> Self {
        Self {
            camera,
            settings,
            cache: None,
        }
    }

    pub fn forward(&mut self, splats: &[GlobalSplat<T>]) -> &Image<T> {
        let cache = render_with_cache(splats, &self.camera, &self.settings);
        &self.cache.insert(cache).image
    }

    pub fn backward(&mut self, d_image: &Image<T>) -> Result<Vec<GlobalGrad<T>>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        render_backward(&cache, &self.camera, d_image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Quat;
    use crate::losses::mse;

    fn cam(w: usize, h: usize) -> Camera<f64> {
        Camera::new(
            40.0,
            40.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            Mat3::identity(),
            Vec3::zero(),
            w,
            h,
        )
        .unwrap()
    }

    fn splat(mean: [f64; 3], s: f64, color: [f64; 3], opacity: f64) -> GlobalSplat<f64> {
        GlobalSplat {
            mean: Vec3::from_array(mean),
            rotation: Mat3::identity(),
            scale: Vec3::splat(s),
            color: Vec3::from_array(color),
            opacity,
        }
    }

    #[test]
    fn axis_projection() {
        let c = cam(33, 33);
        let (d, s) = (4.0, 0.1);
        let p = project(&splat([0.0, 0.0, d], s, [1.0; 3], 0.5), &c).unwrap();
        assert_eq!(p.mean2d, [16.0, 16.0]);
        let e = (40.0 * s / d).powi(2) + DILATION;
        assert!((p.cov2d[0] - e).abs() < 1e-12 && (p.cov2d[2] - e).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-15);
    }

    #[test]
    fn doubling_depth_halves_extent() {
        let c = cam(32, 32);
        let mut g = splat([0.3, -0.2, 3.0], 0.1, [1.0; 3], 0.5);
        g.rotation = Mat3::rotation_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.7);
        g.scale = Vec3::new(0.1, 0.05, 0.2);
        let (_, a, _) = project_undilated(&g, &c).unwrap();
        g.mean = g.mean * 2.0;
        let (_, b, _) = project_undilated(&g, &c).unwrap();
        for k in 0..3 {
            assert!((a[k] / 4.0 - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = cam(8, 8);
        assert!(project(&splat([0.0, 0.0, -1.0], 0.1, [1.0; 3], 0.5), &c).is_none());
        assert!(project(&splat([0.0, 0.0, 1e-4], 0.1, [1.0; 3], 0.5), &c).is_none());
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cam(9, 7);
        let s = RenderSettings {
            background: Vec3::new(0.2, 0.4, 0.6),
            full_frame_boxes: false,
        };
        let img = render(&[], &c, &s);
        assert_eq!(img, Image::filled(9, 7, s.background));
    }

    #[test]
    fn opaque_splat_peaks_at_cap() {
        let c = cam(17, 17);
        let img = render(&[splat([0.0, 0.0, 2.0], 0.2, [1.0; 3], 0.9999)], &c, &RenderSettings::default());
        let px = img.pixel(8, 8);
        assert!((px.x - MAX_WEIGHT).abs() < 1e-12);
    }

    #[test]
    fn full_frame_boxes_change_nothing() {
        let c = cam(24, 20);
        let splats = vec![
            splat([0.1, 0.0, 3.0], 0.15, [1.0, 0.2, 0.1], 0.7),
            splat([-0.2, 0.1, 2.5], 0.1, [0.1, 0.9, 0.3], 0.6),
            splat([0.4, 0.4, 4.0], 0.3, [0.2, 0.2, 0.9], 0.5),
        ];
        let a = render(&splats, &c, &RenderSettings::default());
        let b = render(
            &splats,
            &c,
            &RenderSettings {
                full_frame_boxes: true,
                ..Default::default()
            },
        );
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cam(16, 16);
        let splats = vec![splat([0.0, 0.0, 3.0], 0.2, [0.5; 3], 0.5)];
        let mut r = Rasterizer::new(c, RenderSettings::default());
        r.forward(&splats);
        let g = r.backward(&Image::new(16, 16)).unwrap();
        assert_eq!(g[0], GlobalGrad::default());
        assert!(matches!(r.backward(&Image::new(16, 16)), Err(Error::NoForwardCache)));
    }

    #[test]
    fn mean_gradient_points_toward_target() {
        let c = cam(32, 32);
        let target = render(&[splat([0.2, 0.0, 3.0], 0.15, [1.0; 3], 0.8)], &c, &RenderSettings::default());
        let splats = [splat([0.0, 0.0, 3.0], 0.15, [1.0; 3], 0.8)];
        let cache = render_with_cache(&splats, &c, &RenderSettings::default());
        let n = cache.image.num_values() as f64;
        let d = Image::from_data(
            32,
            32,
            cache.image.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b) / n).collect(),
        )
        .unwrap();
        let g = render_backward(&cache, &c, &d).unwrap();
        // Descent direction must move the splat toward +x.
        assert!(-g[0].mean.x > 0.0);
        assert!(g[0].mean.x.abs() > 10.0 * g[0].mean.y.abs());
        assert!(mse(&cache.image, &target).unwrap() > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = cam(16, 16);
        let mut splats = vec![
            splat([0.05, -0.02, 3.0], 0.12, [0.9, 0.3, 0.2], 0.6),
            splat([-0.08, 0.04, 3.4], 0.18, [0.2, 0.7, 0.4], 0.5),
        ];
        splats[1].rotation = Quat { w: 0.9, x: 0.2, y: -0.3, z: 0.1 }.normalize().to_mat();
        splats[1].scale = Vec3::new(0.18, 0.09, 0.12);
        let weights: Vec<f64> = (0..16 * 16 * 3).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.4).collect();
        let loss = |s: &[GlobalSplat<f64>]| -> f64 {
            let img = render(s, &c, &RenderSettings::default());
            img.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let cache = render_with_cache(&splats, &c, &RenderSettings::default());
        let g = render_backward(&cache, &c, &Image::from_data(16, 16, weights.clone()).unwrap()).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut p = splats.clone();
                p[i].mean[k] += h;
                let mut m = splats.clone();
                m[i].mean[k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g[i].mean[k]).abs() < 1e-4 * fd.abs().max(1.0), "mean {i} {k}: {fd} vs {}", g[i].mean[k]);

                let mut p = splats.clone();
                p[i].scale[k] += h;
                let mut m = splats.clone();
                m[i].scale[k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g[i].scale[k]).abs() < 1e-4 * fd.abs().max(1.0), "scale {i} {k}");
            }
            let mut p = splats.clone();
            p[i].opacity += h;
            let mut m = splats.clone();
            m[i].opacity -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g[i].opacity).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn single_precision_tracks_double() {
        let c = cam(16, 16);
        let splats = vec![splat([0.0, 0.05, 3.0], 0.2, [0.8, 0.5, 0.1], 0.7)];
        let a = render(&splats, &c, &RenderSettings::default());
        let s32: Vec<GlobalSplat<f32>> = splats
            .iter()
            .map(|g| GlobalSplat {
                mean: g.mean.cast(),
                rotation: g.rotation.cast(),
                scale: g.scale.cast(),
                color: g.color.cast(),
                opacity: g.opacity as f32,
            })
            .collect();
        let b = render(&s32, &c.cast::<f32>(), &RenderSettings::default());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - *y as f64).abs() < 1e-4);
        }
    }
}
