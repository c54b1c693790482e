//! Deferred shading of a splatted G-buffer: split-sum specular, SH diffuse
//! with baked visibility, tone mapping, and the final blend with the raw
//! radiance.
//!
//! Per pixel, with `cov = 1 - T` and normalized fields `f = S_f / cov`:
//!
//! ```text
//! I_spec = L_pre(reflect(v, n), r) * (F0 * scale + bias)
//! I_diff = c / pi * <tp(L_sh, V(x)), rho(n)>
//! I_phy  = (1 - m) * I_diff + I_spec
//! D      = srgb(aces(I_phy))
//! out    = S_raw + T * bg + S_alpha * (D - S_raw / cov)
//! ```
//!
//! which equals `cov * (alpha * D + (1 - alpha) * I_raw) + T * bg`. When
//! `S_alpha` is zero the shading terms are skipped entirely, so the output is
//! exactly the raw-radiance composite.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::brdf::{BrdfLut, F0_DIELECTRIC};
use crate::envlight::{specular_sample, PrefilteredEnv};
use crate::io::Image;
use crate::math::Vec3;
use crate::sh::{cosine_lobe, cosine_lobe_grad, TripleProductTensor};
use crate::splat::{Camera, GBuffer, F_ALBEDO, F_ALPHA, F_DEPTH, F_METAL, F_NORMAL, F_RAW, F_ROUGH, NF, T_MIN};
use crate::visibility::{VisibilityGrid, UNOCCLUDED};

/// Floor on n.v.
pub const NDOTV_MIN: f64 = 1e-4;

/// Rational ACES filmic fit, clamped to [0, 1].
#[inline]
pub fn aces_tonemap(x: f64) -> f64 {
    aces_with_grad(x).0
}

#[inline]
fn aces_with_grad(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0);
    }
    let num = x * (2.51 * x + 0.03);
    let den = x * (2.43 * x + 0.59) + 0.14;
    let v = num / den;
    if v >= 1.0 {
        return (1.0, 0.0);
    }
    let dnum = 5.02 * x + 0.03;
    let dden = 4.86 * x + 0.59;
    (v, (dnum * den - num * dden) / (den * den))
}

#[inline]
pub fn linear_to_srgb(x: f64) -> f64 {
    srgb_with_grad(x).0
}

#[inline]
fn srgb_with_grad(x: f64) -> (f64, f64) {
    if x <= 0.003_130_8 {
        (12.92 * x, 12.92)
    } else {
        let p = x.powf(1.0 / 2.4);
        (1.055 * p - 0.055, 1.055 / 2.4 * p / x)
    }
}

#[inline]
pub fn srgb_to_linear(y: f64) -> f64 {
    if y <= 0.040_45 {
        y / 12.92
    } else {
        ((y + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear HDR radiance to display value: sRGB(ACES(x)).
#[inline]
pub fn display_map(x: f64) -> f64 {
    linear_to_srgb(aces_tonemap(x))
}

#[inline]
fn display_with_grad(x: f64) -> (f64, f64) {
    let (a, da) = aces_with_grad(x);
    let (s, ds) = srgb_with_grad(a);
    (s, ds * da)
}

/// Which physical terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadingModel {
    pub diffuse: bool,
    /// Shade with metallic fixed at exactly 1 regardless of the parameters.
    pub force_metallic: bool,
}

impl ShadingModel {
    pub const SPECULAR_ONLY: Self = Self {
        diffuse: false,
        force_metallic: true,
    };
    pub const FULL: Self = Self {
        diffuse: true,
        force_metallic: false,
    };
}

/// Everything the per-pixel shading reads besides the G-buffer.
#[derive(Debug, Clone, Copy)]
pub struct Shader<'a> {
    pub env: &'a PrefilteredEnv,
    pub light_sh: &'a [[f64; 9]; 3],
    pub grid: Option<&'a VisibilityGrid>,
    pub lut: &'a BrdfLut,
    pub tensor: &'a TripleProductTensor,
    pub model: ShadingModel,
    pub background: [f64; 3],
}

/// Diffuse radiance c/pi * <tp(L, V), rho(n)> for each channel.
/// Visibility is read at [`VisibilityGrid::surface_point`].
pub fn shade_diffuse(
    albedo: [f64; 3],
    n: &Vec3,
    x: &Vec3,
    light_sh: &[[f64; 9]; 3],
    grid: Option<&VisibilityGrid>,
    tensor: &TripleProductTensor,
) -> [f64; 3] {
    let v = grid.map_or(UNOCCLUDED, |g| g.query(&g.surface_point(x, n)));
    let rho = cosine_lobe(n);
    let mut e = [0.0; 3];
    for &(i, j, k, c) in &tensor.entries {
        let w = c * rho[i as usize] * v[k as usize];
        for ch in 0..3 {
            e[ch] += w * light_sh[ch][j as usize];
        }
    }
    [0, 1, 2].map(|ch| albedo[ch] / PI * e[ch])
}

/// Split-sum specular radiance toward `wo` (unit, pointing away from the
/// surface).
pub fn shade_specular(
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
    n: &Vec3,
    wo: &Vec3,
    env: &PrefilteredEnv,
    lut: &BrdfLut,
) -> [f64; 3] {
    let nov_raw = n.dot(wo);
    let nov = nov_raw.max(NDOTV_MIN);
    let wr = n * (2.0 * nov_raw) - wo;
    let l = specular_sample(env, &wr, roughness).value;
    let (scale, bias) = lut.lookup(nov, roughness);
    [0, 1, 2].map(|c| {
        let f0 = metallic * albedo[c] + (1.0 - metallic) * F0_DIELECTRIC;
        l[c] * (f0 * scale + bias)
    })
}

/// (1 - m) * diffuse + specular.
pub fn shade_physical(diffuse: [f64; 3], specular: [f64; 3], metallic: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - metallic) * diffuse[c] + specular[c])
}

/// Convex blend of the display-mapped physical color and the raw radiance
/// (already display-referred).
pub fn final_blend(alpha: f64, phy: [f64; 3], raw: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| alpha * display_map(phy[c]) + (1.0 - alpha) * raw[c])
}

/// Intermediate linear maps of a shaded frame.
#[derive(Debug, Clone)]
pub struct ShadedFrame {
    /// Display-space output composited over the background.
    pub image: Image,
    pub raw: Image,
    pub diffuse: Image,
    pub specular: Image,
    pub physical: Image,
    pub alpha: Image,
    pub coverage: Image,
}

#[derive(Debug, Clone, Copy, Default)]
struct PixelShade {
    out: [f64; 3],
    diff: [f64; 3],
    spec: [f64; 3],
    phy: [f64; 3],
    shaded: bool,
}

/// Light gradients gathered by the backward pass.
#[derive(Debug, Clone)]
pub struct LightGrads {
    /// Dense gradient per prefilter level (`texels * 3`).
    pub levels: Vec<Vec<f64>>,
    pub sh: [[f64; 9]; 3],
}

/// Output of [`shade_backward`].
#[derive(Debug, Clone)]
pub struct ShadeGrads {
    pub sums: Vec<f64>,
    pub trans: Vec<f64>,
    pub light: LightGrads,
}

struct RowSink {
    spec: Vec<(u8, u32, [f64; 3])>,
    sh: [[f64; 9]; 3],
}

impl<'a> Shader<'a> {
    fn pixel(
        &self,
        s: &[f64],
        t: f64,
        ray: &Vec3,
        cp: &Vec3,
        grad: Option<([f64; 3], &mut [f64], &mut f64, &mut RowSink)>,
    ) -> PixelShade {
        let bg = self.background;
        let cov = 1.0 - t;
        let raw = [s[F_RAW], s[F_RAW + 1], s[F_RAW + 2]];
        let sa = s[F_ALPHA];
        let mut px = PixelShade::default();
        let skip = |px: &mut PixelShade, grad: Option<([f64; 3], &mut [f64], &mut f64, &mut RowSink)>| {
            for c in 0..3 {
                px.out[c] = raw[c] + t * bg[c];
            }
            if let Some((g, gs, gt, _)) = grad {
                for c in 0..3 {
                    gs[F_RAW + c] += g[c];
                    *gt += g[c] * bg[c];
                }
            }
        };
        if cov <= T_MIN || sa == 0.0 {
            skip(&mut px, grad);
            return px;
        }
        let inv = 1.0 / cov;
        let nraw = Vec3::new(s[F_NORMAL], s[F_NORMAL + 1], s[F_NORMAL + 2]) * inv;
        let nlen = nraw.norm();
        if nlen < 1e-12 {
            skip(&mut px, grad);
            return px;
        }
        px.shaded = true;
        let n = nraw / nlen;
        let c = [s[F_ALBEDO] * inv, s[F_ALBEDO + 1] * inv, s[F_ALBEDO + 2] * inv];
        let r = s[F_ROUGH] * inv;
        let m = if self.model.force_metallic { 1.0 } else { s[F_METAL] * inv };
        let depth = s[F_DEPTH] * inv;
        let x = cp + ray * depth;
        let wo = -ray;

        // Specular.
        let nov_raw = n.dot(&wo);
        let nov = nov_raw.max(NDOTV_MIN);
        let wr = n * (2.0 * nov_raw) - wo;
        let ss = specular_sample(self.env, &wr, r);
        let lut = self.lut.sample(nov, r);
        let mut f0 = [0.0; 3];
        let mut k = [0.0; 3];
        for ch in 0..3 {
            f0[ch] = m * c[ch] + (1.0 - m) * F0_DIELECTRIC;
            k[ch] = f0[ch] * lut.scale + lut.bias;
            px.spec[ch] = ss.value[ch] * k[ch];
        }

        // Diffuse.
        let use_diffuse = self.model.diffuse && m < 1.0;
        let (v, vgrad) = if use_diffuse {
            match self.grid {
                Some(g) => g.query_grad(&g.surface_point(&x, &n)),
                None => (UNOCCLUDED, [[0.0; 3]; 9]),
            }
        } else {
            (UNOCCLUDED, [[0.0; 3]; 9])
        };
        let rho = if use_diffuse { cosine_lobe(&n) } else { [0.0; 9] };
        let mut e = [0.0; 3];
        if use_diffuse {
            for &(i, j, kk, cc) in &self.tensor.entries {
                let w = cc * rho[i as usize] * v[kk as usize];
                for ch in 0..3 {
                    e[ch] += w * self.light_sh[ch][j as usize];
                }
            }
            for ch in 0..3 {
                px.diff[ch] = c[ch] / PI * e[ch];
            }
        }

        let mut dd = [0.0; 3];
        let mut d = [0.0; 3];
        for ch in 0..3 {
            px.phy[ch] = (1.0 - m) * px.diff[ch] + px.spec[ch];
            let (dv, dg) = display_with_grad(px.phy[ch]);
            d[ch] = dv;
            dd[ch] = dg;
            px.out[ch] = raw[ch] + t * bg[ch] + sa * (d[ch] - raw[ch] * inv);
        }

        let Some((g, gs, gt, sink)) = grad else {
            return px;
        };

        // Blend.
        let mut g_inv = 0.0;
        let mut g_phy = [0.0; 3];
        for ch in 0..3 {
            gs[F_RAW + ch] += g[ch] * (1.0 - sa * inv);
            gs[F_ALPHA] += g[ch] * (d[ch] - raw[ch] * inv);
            *gt += g[ch] * bg[ch];
            g_inv -= g[ch] * sa * raw[ch];
            g_phy[ch] = g[ch] * sa * dd[ch];
        }

        // Physical split.
        let mut g_c = [0.0; 3];
        let mut g_r = 0.0;
        let mut g_m = 0.0;
        let mut g_n = Vec3::zeros();
        let mut g_depth = 0.0;
        let mut g_diff = [0.0; 3];
        for ch in 0..3 {
            g_diff[ch] = g_phy[ch] * (1.0 - m);
            g_m -= g_phy[ch] * px.diff[ch];
        }

        // Specular backward.
        let mut g_l = [0.0; 3];
        let mut g_scale = 0.0;
        let mut g_bias = 0.0;
        for ch in 0..3 {
            g_l[ch] = g_phy[ch] * k[ch];
            let g_k = g_phy[ch] * ss.value[ch];
            let g_f0 = g_k * lut.scale;
            g_scale += g_k * f0[ch];
            g_bias += g_k;
            g_c[ch] += g_f0 * m;
            g_m += g_f0 * (c[ch] - F0_DIELECTRIC);
        }
        let g_nov = g_scale * lut.d_scale_dnv + g_bias * lut.d_bias_dnv;
        g_r += g_scale * lut.d_scale_dr + g_bias * lut.d_bias_dr;
        let mut g_nov_raw = if nov_raw > NDOTV_MIN { g_nov } else { 0.0 };
        let mut g_wr = Vec3::zeros();
        for ch in 0..3 {
            g_r += g_l[ch] * ss.d_rough[ch];
            for a in 0..3 {
                g_wr[a] += g_l[ch] * ss.d_dir[ch][a];
            }
        }
        if g_l.iter().any(|v| *v != 0.0) {
            let lo = ss.lo as u8;
            for (taps, lvl, wt) in [(&ss.taps_lo, lo, 1.0 - ss.frac), (&ss.taps_hi, lo + 1, ss.frac)] {
                if wt == 0.0 {
                    continue;
                }
                for q in 0..4 {
                    let w = wt * taps.w[q];
                    if w != 0.0 {
                        sink.spec.push((lvl, taps.idx[q] as u32, g_l.map(|v| v * w)));
                    }
                }
            }
        }
        g_n += g_wr * (2.0 * nov_raw);
        g_nov_raw += 2.0 * n.dot(&g_wr);
        g_n += wo * g_nov_raw;

        // Diffuse backward.
        if use_diffuse {
            let mut g_e = [0.0; 3];
            for ch in 0..3 {
                g_c[ch] += g_diff[ch] * e[ch] / PI;
                g_e[ch] = g_diff[ch] * c[ch] / PI;
            }
            let mut g_rho = [0.0; 9];
            let mut g_v = [0.0; 9];
            for &(i, j, kk, cc) in &self.tensor.entries {
                let (i, j, kk) = (i as usize, j as usize, kk as usize);
                let mut sl = 0.0;
                for ch in 0..3 {
                    let ge = g_e[ch] * cc;
                    sl += ge * self.light_sh[ch][j];
                    sink.sh[ch][j] += ge * rho[i] * v[kk];
                }
                g_rho[i] += sl * v[kk];
                g_v[kk] += sl * rho[i];
            }
            let rg = cosine_lobe_grad(&n);
            for i in 0..9 {
                for a in 0..3 {
                    g_n[a] += g_rho[i] * rg[i][a];
                }
            }
            let mut g_x = Vec3::zeros();
            for kk in 0..9 {
                for a in 0..3 {
                    g_x[a] += g_v[kk] * vgrad[kk][a];
                }
            }
            g_depth += g_x.dot(ray);
            if let Some(g) = self.grid {
                g_n += g_x * g.cell_size();
            }
        }

        // Normalization of the blended fields.
        let g_nraw = (g_n - n * n.dot(&g_n)) / nlen;
        for a in 0..3 {
            gs[F_NORMAL + a] += g_nraw[a] * inv;
            g_inv += g_nraw[a] * s[F_NORMAL + a];
        }
        for ch in 0..3 {
            gs[F_ALBEDO + ch] += g_c[ch] * inv;
            g_inv += g_c[ch] * s[F_ALBEDO + ch];
        }
        gs[F_ROUGH] += g_r * inv;
        g_inv += g_r * s[F_ROUGH];
        if !self.model.force_metallic {
            gs[F_METAL] += g_m * inv;
            g_inv += g_m * s[F_METAL];
        }
        gs[F_DEPTH] += g_depth * inv;
        g_inv += g_depth * s[F_DEPTH];
        *gt += g_inv * inv * inv;
        px
    }

    /// Output color of pixel (`x`, `y`) in full precision.
    pub fn shade_pixel(&self, gb: &GBuffer, cam: &Camera, x: usize, y: usize) -> [f64; 3] {
        let p = y * gb.width + x;
        self.pixel(&gb.sums[p * NF..(p + 1) * NF], gb.trans[p], &cam.pixel_ray(x, y), &cam.position(), None)
            .out
    }

    /// Display-space image composited over the background.
    pub fn shade_image(&self, gb: &GBuffer, cam: &Camera) -> Image {
        let cp = cam.position();
        let mut im = Image::new(gb.width, gb.height, 3);
        im.data
            .par_chunks_mut(gb.width * 3)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..gb.width {
                    let p = y * gb.width + x;
                    let ray = cam.pixel_ray(x, y);
                    let px = self.pixel(&gb.sums[p * NF..(p + 1) * NF], gb.trans[p], &ray, &cp, None);
                    for c in 0..3 {
                        row[x * 3 + c] = px.out[c] as f32;
                    }
                }
            });
        im
    }

    /// Output image plus normalized intermediate maps.
    pub fn shade_frame(&self, gb: &GBuffer, cam: &Camera) -> ShadedFrame {
        let (w, h) = (gb.width, gb.height);
        let cp = cam.position();
        let rows: Vec<Vec<PixelShade>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let p = y * w + x;
                        self.pixel(&gb.sums[p * NF..(p + 1) * NF], gb.trans[p], &cam.pixel_ray(x, y), &cp, None)
                    })
                    .collect()
            })
            .collect();
        let mut f = ShadedFrame {
            image: Image::new(w, h, 3),
            raw: Image::new(w, h, 3),
            diffuse: Image::new(w, h, 3),
            specular: Image::new(w, h, 3),
            physical: Image::new(w, h, 3),
            alpha: Image::new(w, h, 1),
            coverage: Image::new(w, h, 1),
        };
        for (y, row) in rows.iter().enumerate() {
            for (x, px) in row.iter().enumerate() {
                let p = y * w + x;
                f.image.pixel_mut(x, y).copy_from_slice(&px.out.map(|v| v as f32));
                f.diffuse.pixel_mut(x, y).copy_from_slice(&px.diff.map(|v| v as f32));
                f.specular.pixel_mut(x, y).copy_from_slice(&px.spec.map(|v| v as f32));
                f.physical.pixel_mut(x, y).copy_from_slice(&px.phy.map(|v| v as f32));
                let cov = gb.coverage(p);
                f.coverage.data[p] = cov as f32;
                f.alpha.data[p] = gb.field(p, F_ALPHA) as f32;
                for c in 0..3 {
                    f.raw.pixel_mut(x, y)[c] = gb.field(p, F_RAW + c) as f32;
                }
            }
        }
        f
    }

    /// Gradients of a loss w.r.t. the G-buffer and the light, given its
    /// gradient w.r.t. the output image (3 values per pixel).
    pub fn shade_backward(&self, gb: &GBuffer, cam: &Camera, g_out: &[f64]) -> ShadeGrads {
        let (w, h) = (gb.width, gb.height);
        let cp = cam.position();
        let rows: Vec<(Vec<f64>, Vec<f64>, RowSink)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut gs = vec![0.0; w * NF];
                let mut gt = vec![0.0; w];
                let mut sink = RowSink {
                    spec: Vec::new(),
                    sh: [[0.0; 9]; 3],
                };
                for x in 0..w {
                    let p = y * w + x;
                    let g = [g_out[3 * p], g_out[3 * p + 1], g_out[3 * p + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    self.pixel(
                        &gb.sums[p * NF..(p + 1) * NF],
                        gb.trans[p],
                        &cam.pixel_ray(x, y),
                        &cp,
                        Some((g, &mut gs[x * NF..(x + 1) * NF], &mut gt[x], &mut sink)),
                    );
                }
                (gs, gt, sink)
            })
            .collect();
        let mut out = ShadeGrads {
            sums: Vec::with_capacity(w * h * NF),
            trans: Vec::with_capacity(w * h),
            light: LightGrads {
                levels: self.env.levels.iter().map(|l| vec![0.0; l.data.len()]).collect(),
                sh: [[0.0; 9]; 3],
            },
        };
        for (gs, gt, sink) in rows {
            out.sums.extend_from_slice(&gs);
            out.trans.extend_from_slice(&gt);
            for (lvl, idx, g) in sink.spec {
                let buf = &mut out.light.levels[lvl as usize];
                for c in 0..3 {
                    buf[idx as usize * 3 + c] += g[c];
                }
            }
            for c in 0..3 {
                for i in 0..9 {
                    out.light.sh[c][i] += sink.sh[c][i];
                }
            }
        }
        out
    }
}
