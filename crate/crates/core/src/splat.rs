//! Tile-based software rasterizer for 3D Gaussians.
//!
//! Gaussians are projected with the usual first-order (EWA) approximation,
//! sorted globally by center distance, binned into 16x16 tiles and
//! alpha-composited front to back per pixel. Every shading field is
//! accumulated as a weighted sum `S_f = sum_i w_i f_i` with
//! `w_i = a_i T_i`; the G-buffer keeps these sums together with the final
//! transmittance `T`, so `coverage = 1 - T` and normalized fields are
//! `S_f / coverage`.
//!
//! The backward pass follows the same traversal in reverse and returns
//! gradients with respect to the raw Gaussian parameters.

use rayon::prelude::*;

use crate::envlight::{face_uv_to_dir, CubeMap, FACES};
use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_normalize_backward, quat_to_mat, quat_to_mat_partials, Mat3, Vec3};
use crate::scene::{shortest_axis, Gaussian, ALBEDO, ALPHA, LOG_SCALE, METAL, OPACITY, PARAMS, POS, ROT, ROUGH, SH};
use crate::sh::{basis16, basis16_grad};

pub const TILE: usize = 16;
/// Added to the diagonal of every projected covariance (pixels^2).
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance would drop below this.
pub const T_MIN: f64 = 1e-4;
/// Contributions beyond 3 sigma (Mahalanobis) are dropped.
const POWER_CUT: f64 = -4.5;

pub const F_ALBEDO: usize = 0;
pub const F_ROUGH: usize = 3;
pub const F_METAL: usize = 4;
pub const F_NORMAL: usize = 5;
pub const F_DEPTH: usize = 8;
pub const F_ALPHA: usize = 9;
pub const F_RAW: usize = 10;
/// Blended fields per pixel.
pub const NF: usize = 13;
const NFEAT: usize = 10;

/// Pinhole camera with a world-to-camera rigid transform (x right, y down,
/// z forward). Pixel (x, y) covers [x, x+1) x [y, y+1).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rot: Mat3,
    pub trans: Vec3,
    pub znear: f64,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rot: Mat3,
        trans: Vec3,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera resolution must be nonzero"));
        }
        let err = (rot.transpose() * rot - Mat3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::invalid(format!("camera rotation is not orthonormal (error {err:e})")));
        }
        if !trans.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera translation is not finite"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rot,
            trans,
            znear: 0.2,
        })
    }

    /// Camera at `eye` looking at `target`, with a horizontal field of view
    /// in degrees and the principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x_deg: f64, width: usize, height: usize) -> Result<Self> {
        let fwd = (target - eye).normalize();
        let mut right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            right = fwd.cross(&Vec3::new(1.0, 0.0, 0.0));
            if right.norm() < 1e-9 {
                right = fwd.cross(&Vec3::new(0.0, 1.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, rot, -(rot * eye))
    }

    fn lim_x(&self) -> f64 {
        1.3 * 0.5 * self.width as f64 / self.fx
    }

    fn lim_y(&self) -> f64 {
        1.3 * 0.5 * self.height as f64 / self.fy
    }

    pub fn position(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    /// Unit world-space ray through image point (px, py).
    pub fn ray_dir(&self, px: f64, py: f64) -> Vec3 {
        let d = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        (self.rot.transpose() * d).normalize()
    }

    /// Ray through the center of pixel (x, y).
    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vec3 {
        self.ray_dir(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// Direction used to evaluate each Gaussian's radiance SH.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShDir {
    /// The pixel's view ray, evaluated per contribution.
    PixelRay,
    /// Camera-to-center direction, once per Gaussian.
    GaussianCenter,
}

#[derive(Debug, Clone, Copy)]
pub struct RasterOptions {
    pub sh_dir: ShDir,
    /// Accumulate shading fields; when false only transmittance is computed.
    pub fields: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            sh_dir: ShDir::PixelRay,
            fields: true,
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub mean: [f64; 2],
    /// Projected covariance before dilation, (xx, xy, yy).
    pub cov2d: [f64; 3],
    /// Inverse of the dilated covariance, (A, B, C).
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: f64,
}

/// Clamps the view-space offset used in the projection Jacobian to 1.3x the
/// half field of view; returns the clamped value and whether it was free.
#[inline]
fn frustum_clamp(x: f64, z: f64, lim: f64) -> (f64, bool) {
    let t = x / z;
    if t < -lim {
        (-lim * z, false)
    } else if t > lim {
        (lim * z, false)
    } else {
        (x, true)
    }
}

/// Projects `g`; `None` when behind the near plane or entirely off screen.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projection> {
    let p = g.position();
    let pc = cam.rot * p + cam.trans;
    if pc.z <= cam.znear {
        return None;
    }
    let r = g.rotation_matrix();
    let s = g.scale();
    let s2 = Mat3::from_diagonal(&s.component_mul(&s));
    let sigma = r * s2 * r.transpose();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (xj, _) = frustum_clamp(x, z, cam.lim_x());
    let (yj, _) = frustum_clamp(y, z, cam.lim_y());
    let j = nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * xj / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * yj / (z * z),
    );
    let m = j * cam.rot;
    let cov = m * sigma * m.transpose();
    let (a, b, c) = (cov[(0, 0)] + DILATION, cov[(0, 1)], cov[(1, 1)] + DILATION);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let mid = 0.5 * (a + c);
    let lmax = mid + (mid * mid - det).max(0.1).sqrt();
    let radius = (3.0 * lmax.sqrt()).ceil();
    if mean[0] + radius < 0.0
        || mean[0] - radius > cam.width as f64
        || mean[1] + radius < 0.0
        || mean[1] - radius > cam.height as f64
    {
        return None;
    }
    Some(Projection {
        mean,
        cov2d: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        conic: [c / det, -b / det, a / det],
        depth: (p - cam.position()).norm(),
        radius,
    })
}

#[derive(Debug, Clone)]
struct Splat {
    id: u32,
    proj: Projection,
    opacity: f64,
    feat: [f64; NFEAT],
    /// Radiance SH (16 x 3, coefficient-major), or the fixed color in
    /// center mode stored in the first three slots.
    sh: [f64; 48],
}

/// Per-frame data kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RasterState {
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    opts: RasterOptions,
}

/// Splatted screen-space maps.
#[derive(Debug, Clone)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    /// `NF` weighted sums per pixel.
    pub sums: Vec<f64>,
    /// Final transmittance per pixel.
    pub trans: Vec<f64>,
    n_contrib: Vec<u32>,
}

impl GBuffer {
    #[inline]
    pub fn coverage(&self, px: usize) -> f64 {
        1.0 - self.trans[px]
    }

    #[inline]
    pub fn sum(&self, px: usize, f: usize) -> f64 {
        self.sums[px * NF + f]
    }

    /// Field `f` divided by coverage (0 where nothing was splatted).
    pub fn field(&self, px: usize, f: usize) -> f64 {
        let c = self.coverage(px);
        if c > T_MIN {
            self.sum(px, f) / c
        } else {
            0.0
        }
    }

    /// Renormalized blended normal, when coverage allows.
    pub fn normal(&self, px: usize) -> Option<Vec3> {
        if self.coverage(px) <= T_MIN {
            return None;
        }
        let n = Vec3::new(
            self.sum(px, F_NORMAL),
            self.sum(px, F_NORMAL + 1),
            self.sum(px, F_NORMAL + 2),
        );
        let len = n.norm();
        (len > 1e-12).then(|| n / len)
    }
}

fn center_color(g: &Gaussian, dir: &Vec3) -> [f64; 3] {
    let b = basis16(dir);
    let mut col = [0.5; 3];
    for (k, bk) in b.iter().enumerate() {
        for (c, v) in col.iter_mut().enumerate() {
            *v += bk * g.sh(k, c);
        }
    }
    col.map(|v| v.max(0.0))
}

fn make_splat(id: usize, g: &Gaussian, cam: &Camera, opts: &RasterOptions) -> Option<Splat> {
    let proj = project_gaussian(g, cam)?;
    let opacity = g.opacity();
    let mut feat = [0.0; NFEAT];
    let mut sh = [0.0; 48];
    if opts.fields {
        let cp = cam.position();
        let alb = g.albedo();
        feat[..3].copy_from_slice(&alb);
        feat[3] = g.roughness();
        feat[4] = g.metallic();
        let n = crate::scene::gaussian_normal(g, &cp);
        feat[5..8].copy_from_slice(n.as_slice());
        feat[8] = proj.depth;
        feat[9] = g.alpha();
        match opts.sh_dir {
            ShDir::PixelRay => {
                for (k, v) in sh.iter_mut().enumerate() {
                    *v = g.raw[SH + k] as f64;
                }
            }
            ShDir::GaussianCenter => {
                let dir = (g.position() - cp).normalize();
                sh[..3].copy_from_slice(&center_color(g, &dir));
            }
        }
    }
    Some(Splat {
        id: id as u32,
        proj,
        opacity,
        feat,
        sh,
    })
}

#[inline]
fn pixel_color(s: &Splat, basis: &[f64; 16], mode: ShDir) -> [f64; 3] {
    match mode {
        ShDir::GaussianCenter => [s.sh[0], s.sh[1], s.sh[2]],
        ShDir::PixelRay => {
            let mut col = [0.5; 3];
            for k in 0..16 {
                let b = basis[k];
                col[0] += b * s.sh[3 * k];
                col[1] += b * s.sh[3 * k + 1];
                col[2] += b * s.sh[3 * k + 2];
            }
            col.map(|v| v.max(0.0))
        }
    }
}

/// Opacity-weighted footprint at a pixel center; `None` when the
/// contribution is dropped.
#[inline]
fn footprint(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.proj.mean[0];
    let dy = py - s.proj.mean[1];
    let [ca, cb, cc] = s.proj.conic;
    let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
    if power > 0.0 || power < POWER_CUT {
        return None;
    }
    let gval = power.exp();
    let raw = s.opacity * gval;
    let a = raw.min(ALPHA_MAX);
    if a < ALPHA_MIN {
        return None;
    }
    Some((a, gval, dx, dy, raw > ALPHA_MAX))
}

/// Splats `gaussians` into a G-buffer seen from `cam`.
pub fn rasterize(gaussians: &[Gaussian], cam: &Camera, opts: &RasterOptions) -> GBuffer {
    rasterize_with_state(gaussians, cam, opts).0
}

pub fn rasterize_with_state(gaussians: &[Gaussian], cam: &Camera, opts: &RasterOptions) -> (GBuffer, RasterState) {
    let mut splats: Vec<Splat> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| make_splat(i, g, cam, opts))
        .collect();
    splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.id.cmp(&b.id)));

    let (w, h) = (cam.width, cam.height);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let r = s.proj.radius;
        let [mx, my] = s.proj.mean;
        let tx0 = ((mx - r) / TILE as f64).floor().max(0.0) as usize;
        let ty0 = ((my - r) / TILE as f64).floor().max(0.0) as usize;
        let tx1 = (((mx + r) / TILE as f64).floor().max(0.0) as usize).min(tiles_x - 1);
        let ty1 = (((my + r) / TILE as f64).floor().max(0.0) as usize).min(tiles_y - 1);
        if tx0 >= tiles_x || ty0 >= tiles_y {
            continue;
        }
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let results: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let (x0, y0) = (tx * TILE, ty * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            let npx = (x1 - x0) * (y1 - y0);
            let nf = if opts.fields { NF } else { 0 };
            let mut sums = vec![0.0; npx * nf];
            let mut trans = vec![1.0; npx];
            let mut count = vec![0u32; npx];
            let list = &tiles[t];
            for y in y0..y1 {
                for x in x0..x1 {
                    let lp = (y - y0) * (x1 - x0) + (x - x0);
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let basis = if opts.fields && opts.sh_dir == ShDir::PixelRay {
                        basis16(&cam.ray_dir(px, py))
                    } else {
                        [0.0; 16]
                    };
                    let mut tr = 1.0;
                    let mut last = 0u32;
                    let acc = &mut sums[lp * nf..(lp + 1) * nf];
                    for (li, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let Some((a, ..)) = footprint(s, px, py) else {
                            continue;
                        };
                        let next = tr * (1.0 - a);
                        if next < T_MIN {
                            break;
                        }
                        if opts.fields {
                            let wgt = a * tr;
                            for f in 0..NFEAT {
                                acc[f] += wgt * s.feat[f];
                            }
                            let col = pixel_color(s, &basis, opts.sh_dir);
                            for c in 0..3 {
                                acc[F_RAW + c] += wgt * col[c];
                            }
                        }
                        tr = next;
                        last = li as u32 + 1;
                    }
                    trans[lp] = tr;
                    count[lp] = last;
                }
            }
            (sums, trans, count)
        })
        .collect();

    let nf = if opts.fields { NF } else { 0 };
    let mut gb = GBuffer {
        width: w,
        height: h,
        sums: vec![0.0; w * h * nf],
        trans: vec![1.0; w * h],
        n_contrib: vec![0; w * h],
    };
    for (t, (sums, trans, count)) in results.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let (x0, y0) = (tx * TILE, ty * TILE);
        let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let lp = (y - y0) * (x1 - x0) + (x - x0);
                let p = y * w + x;
                gb.trans[p] = trans[lp];
                gb.n_contrib[p] = count[lp];
                gb.sums[p * nf..(p + 1) * nf].copy_from_slice(&sums[lp * nf..(lp + 1) * nf]);
            }
        }
    }
    (
        gb,
        RasterState {
            splats,
            tiles,
            tiles_x,
            opts: *opts,
        },
    )
}

// Per-splat accumulator layout in the backward pass.
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPAC: usize = 5;
const G_FEAT: usize = 6;
const G_SH: usize = 16;
const GS: usize = 64;

/// Gradients of a scalar loss with respect to raw Gaussian parameters, given
/// its gradients with respect to the G-buffer sums (`NF` per pixel) and the
/// final transmittance.
pub fn rasterize_backward(
    gaussians: &[Gaussian],
    cam: &Camera,
    state: &RasterState,
    gb: &GBuffer,
    g_sums: &[f64],
    g_trans: &[f64],
) -> Vec<[f64; PARAMS]> {
    let (w, h) = (gb.width, gb.height);
    let tiles_x = state.tiles_x;
    let opts = state.opts;
    let splats = &state.splats;
    let nf = if opts.fields { NF } else { 0 };

    let partials: Vec<Vec<f64>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &state.tiles[t];
            let mut acc = vec![0.0; list.len() * GS];
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let (x0, y0) = (tx * TILE, ty * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let last = gb.n_contrib[p] as usize;
                    if last == 0 {
                        continue;
                    }
                    let gs = &g_sums[p * nf..(p + 1) * nf];
                    let gt = g_trans[p];
                    if gt == 0.0 && gs.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let basis = if opts.fields && opts.sh_dir == ShDir::PixelRay {
                        basis16(&cam.ray_dir(px, py))
                    } else {
                        [0.0; 16]
                    };
                    let t_final = gb.trans[p];
                    let mut tr = t_final;
                    let mut behind = [0.0; NF];
                    let mut last_a = 0.0;
                    let mut last_f = [0.0; NF];
                    for li in (0..last).rev() {
                        let s = &splats[list[li] as usize];
                        let Some((a, gval, dx, dy, clamped)) = footprint(s, px, py) else {
                            continue;
                        };
                        tr /= 1.0 - a;
                        let wgt = a * tr;
                        let mut f = [0.0; NF];
                        let mut col_raw = [0.0; 3];
                        if opts.fields {
                            f[..NFEAT].copy_from_slice(&s.feat);
                            if opts.sh_dir == ShDir::PixelRay {
                                col_raw = [0.5; 3];
                                for k in 0..16 {
                                    for c in 0..3 {
                                        col_raw[c] += basis[k] * s.sh[3 * k + c];
                                    }
                                }
                                for c in 0..3 {
                                    f[F_RAW + c] = col_raw[c].max(0.0);
                                }
                            } else {
                                f[F_RAW..].copy_from_slice(&s.sh[..3]);
                            }
                        }
                        let ga = &mut acc[li * GS..(li + 1) * GS];
                        if opts.fields {
                            for k in 0..NFEAT {
                                ga[G_FEAT + k] += wgt * gs[k];
                            }
                            match opts.sh_dir {
                                ShDir::PixelRay => {
                                    for c in 0..3 {
                                        if col_raw[c] > 0.0 {
                                            let g = wgt * gs[F_RAW + c];
                                            for k in 0..16 {
                                                ga[G_SH + 3 * k + c] += g * basis[k];
                                            }
                                        }
                                    }
                                }
                                ShDir::GaussianCenter => {
                                    for c in 0..3 {
                                        ga[G_SH + c] += wgt * gs[F_RAW + c];
                                    }
                                }
                            }
                        }
                        for k in 0..nf {
                            behind[k] = last_a * last_f[k] + (1.0 - last_a) * behind[k];
                        }
                        last_a = a;
                        last_f = f;
                        let mut dl_da = 0.0;
                        for k in 0..nf {
                            dl_da += gs[k] * (f[k] - behind[k]);
                        }
                        dl_da *= tr;
                        dl_da -= gt * t_final / (1.0 - a);
                        if clamped {
                            continue;
                        }
                        ga[G_OPAC] += dl_da * gval;
                        let dl_dpow = dl_da * s.opacity * gval;
                        let [ca, cb, cc] = s.proj.conic;
                        ga[G_MEAN] += dl_dpow * (ca * dx + cb * dy);
                        ga[G_MEAN + 1] += dl_dpow * (cb * dx + cc * dy);
                        ga[G_CONIC] += dl_dpow * (-0.5 * dx * dx);
                        ga[G_CONIC + 1] += dl_dpow * (-dx * dy);
                        ga[G_CONIC + 2] += dl_dpow * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut per_splat = vec![[0.0; GS]; splats.len()];
    for (t, acc) in partials.iter().enumerate() {
        for (li, &si) in state.tiles[t].iter().enumerate() {
            let dst = &mut per_splat[si as usize];
            for k in 0..GS {
                dst[k] += acc[li * GS + k];
            }
        }
    }

    let per_gaussian: Vec<(usize, [f64; PARAMS])> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, acc)| (s.id as usize, splat_param_grads(&gaussians[s.id as usize], cam, acc, &opts)))
        .collect();
    let mut out = vec![[0.0; PARAMS]; gaussians.len()];
    for (id, g) in per_gaussian {
        out[id] = g;
    }
    out
}

/// Chains screen-space gradients of one splat back to its raw parameters.
fn splat_param_grads(g: &Gaussian, cam: &Camera, acc: &[f64; GS], opts: &RasterOptions) -> [f64; PARAMS] {
    let mut out = [0.0; PARAMS];
    let p = g.position();
    let cp = cam.position();
    let (q, qn) = quat_normalize(g.raw_rotation());
    let r = quat_to_mat(q);
    let s = g.scale();
    let mut g_r = Mat3::zeros();
    let mut g_p = Vec3::zeros();

    // Opacity.
    let o = g.opacity();
    out[OPACITY] = acc[G_OPAC] * o * (1.0 - o);

    if opts.fields {
        let alb = g.albedo();
        for c in 0..3 {
            out[ALBEDO + c] = acc[G_FEAT + c] * alb[c] * (1.0 - alb[c]);
        }
        let rr = g.roughness();
        out[ROUGH] = acc[G_FEAT + 3] * rr * (1.0 - rr);
        let m = g.metallic();
        out[METAL] = acc[G_FEAT + 4] * m * (1.0 - m);
        let al = g.alpha();
        out[ALPHA] = acc[G_FEAT + 9] * al * (1.0 - al);
        // Normal: sign * R e_k.
        let k = shortest_axis(&s);
        let axis: Vec3 = r.column(k).into();
        let sign = if axis.dot(&(cp - p)) < 0.0 { -1.0 } else { 1.0 };
        for a in 0..3 {
            g_r[(a, k)] += sign * acc[G_FEAT + 5 + a];
        }
        // Depth = |p - c|.
        let d = p - cp;
        let dn = d.norm();
        if dn > 0.0 {
            g_p += d / dn * acc[G_FEAT + 8];
        }
        match opts.sh_dir {
            ShDir::PixelRay => {
                for k in 0..48 {
                    out[SH + k] = acc[G_SH + k];
                }
            }
            ShDir::GaussianCenter => {
                let dir = d / dn;
                let b = basis16(&dir);
                let bg = basis16_grad(&dir);
                let mut g_dir = Vec3::zeros();
                for c in 0..3 {
                    let mut v = 0.5;
                    for k in 0..16 {
                        v += b[k] * g.sh(k, c);
                    }
                    if v <= 0.0 {
                        continue;
                    }
                    let gc = acc[G_SH + c];
                    for k in 0..16 {
                        out[SH + 3 * k + c] = gc * b[k];
                        for a in 0..3 {
                            g_dir[a] += gc * g.sh(k, c) * bg[k][a];
                        }
                    }
                }
                g_p += (g_dir - dir * dir.dot(&g_dir)) / dn;
            }
        }
    }

    // Projection: mean and conic.
    let pc = cam.rot * p + cam.trans;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let s2 = Mat3::from_diagonal(&s.component_mul(&s));
    let sigma = r * s2 * r.transpose();
    let (xj, x_free) = frustum_clamp(x, z, cam.lim_x());
    let (yj, y_free) = frustum_clamp(y, z, cam.lim_y());
    let j = nalgebra::Matrix2x3::new(fx / z, 0.0, -fx * xj / (z * z), 0.0, fy / z, -fy * yj / (z * z));
    let m = j * cam.rot;
    let cov = m * sigma * m.transpose();
    let (a, b, c) = (cov[(0, 0)] + DILATION, cov[(0, 1)], cov[(1, 1)] + DILATION);
    let det = a * c - b * b;
    let det2 = det * det;
    let (ga_, gb_, gc_) = (acc[G_CONIC], acc[G_CONIC + 1], acc[G_CONIC + 2]);
    let g_a = ga_ * (-c * c / det2) + gb_ * (b * c / det2) + gc_ * (-b * b / det2);
    let g_b = ga_ * (2.0 * b * c / det2) + gb_ * (-(a * c + b * b) / det2) + gc_ * (2.0 * a * b / det2);
    let g_c = ga_ * (-b * b / det2) + gb_ * (a * b / det2) + gc_ * (-a * a / det2);
    let g_cov = nalgebra::Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);
    let g_sigma = m.transpose() * g_cov * m;
    let g_m = 2.0 * g_cov * m * sigma;
    let g_j = g_m * cam.rot.transpose();

    let mut g_pc = Vec3::zeros();
    let (gu, gv) = (acc[G_MEAN], acc[G_MEAN + 1]);
    g_pc.x += gu * fx / z;
    g_pc.y += gv * fy / z;
    g_pc.z += -gu * fx * x / (z * z) - gv * fy * y / (z * z);
    let z2 = z * z;
    let z3 = z2 * z;
    // J02 = -fx xj / z^2 with xj = x, or xj = +-lim z when clamped.
    if x_free {
        g_pc.x += g_j[(0, 2)] * (-fx / z2);
        g_pc.z += g_j[(0, 2)] * (2.0 * fx * xj / z3);
    } else {
        g_pc.z += g_j[(0, 2)] * (fx * xj / z3);
    }
    if y_free {
        g_pc.y += g_j[(1, 2)] * (-fy / z2);
        g_pc.z += g_j[(1, 2)] * (2.0 * fy * yj / z3);
    } else {
        g_pc.z += g_j[(1, 2)] * (fy * yj / z3);
    }
    g_pc.z += g_j[(0, 0)] * (-fx / z2) + g_j[(1, 1)] * (-fy / z2);
    g_p += cam.rot.transpose() * g_pc;

    // Sigma = R S^2 R^T.
    g_r += 2.0 * g_sigma * r * s2;
    let rt_gs_r = r.transpose() * g_sigma * r;
    for k in 0..3 {
        out[LOG_SCALE + k] = 2.0 * s[k] * rt_gs_r[(k, k)] * s[k];
    }
    let parts = quat_to_mat_partials(q);
    let mut g_q = [0.0; 4];
    for (i, pm) in parts.iter().enumerate() {
        g_q[i] = g_r.component_mul(pm).sum();
    }
    let g_raw_q = quat_normalize_backward(q, qn, g_q);
    for i in 0..4 {
        out[ROT + i] = g_raw_q[i];
    }
    for a in 0..3 {
        out[POS + a] = g_p[a];
    }
    out
}

/// Camera for cube face `face` at `center` whose pixel grid matches the
/// cubemap texel grid at `res`.
pub fn cube_face_camera(center: &Vec3, face: usize, res: usize) -> Camera {
    let f = face_uv_to_dir(face, 0.0, 0.0);
    let u = face_uv_to_dir(face, 1.0, 0.0) - f;
    let v = face_uv_to_dir(face, 0.0, 1.0) - f;
    let rot = Mat3::from_rows(&[u.transpose(), v.transpose(), f.transpose()]);
    let h = 0.5 * res as f64;
    Camera {
        fx: h,
        fy: h,
        cx: h,
        cy: h,
        width: res,
        height: res,
        rot,
        trans: -(rot * center),
        znear: 1e-3,
    }
}

/// Transmittance to a white background seen from `center` through six 90
/// degree cameras (1 = unoccluded), as a one-channel cubemap.
pub fn render_opacity_cubemap(gaussians: &[Gaussian], center: &Vec3, face_res: usize) -> Result<CubeMap> {
    if face_res < 16 {
        return Err(Error::invalid(format!("cube face resolution must be >= 16, got {face_res}")));
    }
    let opts = RasterOptions {
        sh_dir: ShDir::PixelRay,
        fields: false,
    };
    let mut map = CubeMap::new(face_res, 1);
    let n = face_res * face_res;
    for face in 0..FACES {
        let cam = cube_face_camera(center, face, face_res);
        let gb = rasterize(gaussians, &cam, &opts);
        for (k, t) in gb.trans.iter().enumerate() {
            map.data[face * n + k] = *t as f32;
        }
    }
    Ok(map)
}
