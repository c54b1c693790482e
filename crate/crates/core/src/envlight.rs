//! Environment light stored as a cubemap, plus the prefiltered mip pyramid
//! used by the split-sum specular path.
//!
//! Face order and orientation follow the usual GL cube convention. Faces are
//! +X, -X, +Y, -Y, +Z, -Z; texel (i, j) of a face has column `i`, row `j`
//! (row 0 at the top) and face coordinates `u = 2(i + 0.5)/R - 1`,
//! `v = 2(j + 0.5)/R - 1`. The unnormalized texel directions are:
//!
//! | face | direction      |
//! |------|----------------|
//! | +X   | ( 1, -v, -u)   |
//! | -X   | (-1, -v,  u)   |
//! | +Y   | ( u,  1,  v)   |
//! | -Y   | ( u, -1, -v)   |
//! | +Z   | ( u, -v,  1)   |
//! | -Z   | (-u, -v, -1)   |

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::brdf::{sample_ggx_half, A_MIN};
use crate::error::{Error, Result};
use crate::math::{hammersley, tangent_frame, Vec3};
use crate::sh::basis16;

pub const FACES: usize = 6;

/// (major axis, major sign, s axis, s sign, t axis, t sign) per face.
const FACE_AXES: [(usize, f64, usize, f64, usize, f64); 6] = [
    (0, 1.0, 2, -1.0, 1, -1.0),
    (0, -1.0, 2, 1.0, 1, -1.0),
    (1, 1.0, 0, 1.0, 2, 1.0),
    (1, -1.0, 0, 1.0, 2, -1.0),
    (2, 1.0, 0, 1.0, 1, -1.0),
    (2, -1.0, 0, -1.0, 1, -1.0),
];

/// Unnormalized direction through face coordinates (u, v) in [-1, 1].
pub fn face_uv_to_dir(face: usize, u: f64, v: f64) -> Vec3 {
    match face {
        0 => Vec3::new(1.0, -v, -u),
        1 => Vec3::new(-1.0, -v, u),
        2 => Vec3::new(u, 1.0, v),
        3 => Vec3::new(u, -1.0, -v),
        4 => Vec3::new(u, -v, 1.0),
        _ => Vec3::new(-u, -v, -1.0),
    }
}

/// Face and (u, v) hit by a nonzero direction.
pub fn dir_to_face_uv(d: &Vec3) -> (usize, f64, f64) {
    let face = major_face(d);
    let (ma, ms, sa, ss, ta, ts) = FACE_AXES[face];
    let m = ms * d[ma];
    (face, ss * d[sa] / m, ts * d[ta] / m)
}

#[inline]
fn major_face(d: &Vec3) -> usize {
    let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
    if ax >= ay && ax >= az {
        if d.x >= 0.0 {
            0
        } else {
            1
        }
    } else if ay >= az {
        if d.y >= 0.0 {
            2
        } else {
            3
        }
    } else if d.z >= 0.0 {
        4
    } else {
        5
    }
}

/// Unit direction through the center of texel (i, j) on `face`.
pub fn texel_dir(res: usize, face: usize, i: usize, j: usize) -> Vec3 {
    let u = 2.0 * (i as f64 + 0.5) / res as f64 - 1.0;
    let v = 2.0 * (j as f64 + 0.5) / res as f64 - 1.0;
    face_uv_to_dir(face, u, v).normalize()
}

/// Exact solid angle subtended by texel (i, j) of a face with `res` texels per
/// side (identical for all faces).
pub fn texel_solid_angle(res: usize, i: usize, j: usize) -> f64 {
    let area = |x: f64, y: f64| (x * y).atan2((x * x + y * y + 1.0).sqrt());
    let step = 2.0 / res as f64;
    let x0 = -1.0 + i as f64 * step;
    let y0 = -1.0 + j as f64 * step;
    let (x1, y1) = (x0 + step, y0 + step);
    area(x1, y1) - area(x0, y1) - area(x1, y0) + area(x0, y0)
}

/// Per-texel directions, solid angles and SH basis values for one resolution.
#[derive(Debug)]
pub struct TexelTable {
    pub res: usize,
    pub dirs: Vec<Vec3>,
    pub solid_angle: Vec<f64>,
    pub basis: Vec<[f64; 16]>,
}

impl TexelTable {
    fn new(res: usize) -> Self {
        let n = FACES * res * res;
        let mut dirs = Vec::with_capacity(n);
        let mut solid_angle = Vec::with_capacity(n);
        let mut basis = Vec::with_capacity(n);
        for f in 0..FACES {
            for j in 0..res {
                for i in 0..res {
                    let d = texel_dir(res, f, i, j);
                    dirs.push(d);
                    solid_angle.push(texel_solid_angle(res, i, j));
                    basis.push(basis16(&d));
                }
            }
        }
        Self {
            res,
            dirs,
            solid_angle,
            basis,
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

/// Shared texel table for `res`, built on first use.
pub fn texel_table(res: usize) -> Arc<TexelTable> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<TexelTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(res)
        .or_insert_with(|| Arc::new(TexelTable::new(res)))
        .clone()
}

/// Six square faces of `channels`-valued texels, stored face-major then
/// row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeMap {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl CubeMap {
    pub fn new(res: usize, channels: usize) -> Self {
        Self {
            res,
            channels,
            data: vec![0.0; FACES * res * res * channels],
        }
    }

    pub fn constant(res: usize, value: &[f32]) -> Self {
        let mut m = Self::new(res, value.len());
        for t in m.data.chunks_exact_mut(value.len()) {
            t.copy_from_slice(value);
        }
        m
    }

    /// Fills every texel from a function of its center direction.
    pub fn from_fn(res: usize, channels: usize, f: impl Fn(&Vec3) -> Vec<f64>) -> Self {
        let table = texel_table(res);
        let mut m = Self::new(res, channels);
        for (t, d) in table.dirs.iter().enumerate() {
            let v = f(d);
            for c in 0..channels {
                m.data[t * channels + c] = v[c] as f32;
            }
        }
        m
    }

    #[inline]
    pub fn texel_count(&self) -> usize {
        FACES * self.res * self.res
    }

    #[inline]
    pub fn texel_index(&self, face: usize, i: usize, j: usize) -> usize {
        (face * self.res + j) * self.res + i
    }

    pub fn texel(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            res: self.res,
            channels: self.channels,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Solid-angle weighted mean of each channel.
    pub fn weighted_mean(&self) -> Vec<f64> {
        let table = texel_table(self.res);
        let mut acc = vec![0.0; self.channels];
        for t in 0..self.texel_count() {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += self.data[t * self.channels + c] as f64 * table.solid_angle[t];
            }
        }
        acc.iter().map(|a| a / (4.0 * std::f64::consts::PI)).collect()
    }

    /// Resamples to another face resolution by bilinear lookups.
    pub fn resample(&self, res: usize) -> Self {
        if res == self.res {
            return self.clone();
        }
        let table = texel_table(res);
        let mut out = Self::new(res, self.channels);
        for (t, d) in table.dirs.iter().enumerate() {
            let v = sample_dir(self, d);
            for c in 0..self.channels {
                out.data[t * self.channels + c] = v[c] as f32;
            }
        }
        out
    }
}

/// Four bilinear taps of a lookup, with weight derivatives w.r.t. the
/// (unnormalized) lookup direction.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw: [[f64; 3]; 4],
}

/// Bilinear taps for direction `d` on a cube of resolution `res`. Lookups
/// clamp at face borders.
pub fn bilinear_taps(res: usize, d: &Vec3) -> Taps {
    let face = major_face(d);
    let (ma, ms, sa, ss, ta, ts) = FACE_AXES[face];
    let m = ms * d[ma];
    let u = ss * d[sa] / m;
    let v = ts * d[ta] / m;
    // du/dd and dv/dd
    let mut du = [0.0; 3];
    let mut dv = [0.0; 3];
    du[sa] += ss / m;
    du[ma] += -u / d[ma];
    dv[ta] += ts / m;
    dv[ma] += -v / d[ma];

    let r = res as f64;
    let s = (u + 1.0) * 0.5 * r - 0.5;
    let t = (v + 1.0) * 0.5 * r - 0.5;
    let s0 = s.floor();
    let t0 = t.floor();
    let fx = s - s0;
    let fy = t - t0;
    let clampi = |x: f64| (x.max(0.0) as usize).min(res - 1);
    let (i0, i1) = (clampi(s0), clampi(s0 + 1.0));
    let (j0, j1) = (clampi(t0), clampi(t0 + 1.0));
    let base = face * res * res;
    let idx = [
        base + j0 * res + i0,
        base + j0 * res + i1,
        base + j1 * res + i0,
        base + j1 * res + i1,
    ];
    let w = [
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    ];
    // dw/ds and dw/dt, with ds/du = dt/dv = r/2
    let dws = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let dwt = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let half = 0.5 * r;
    let mut dw = [[0.0; 3]; 4];
    for k in 0..4 {
        for a in 0..3 {
            dw[k][a] = half * (dws[k] * du[a] + dwt[k] * dv[a]);
        }
    }
    Taps { idx, w, dw }
}

/// Bilinear sample of every channel in direction `dir`.
pub fn sample_dir(map: &CubeMap, dir: &Vec3) -> Vec<f64> {
    let taps = bilinear_taps(map.res, dir);
    let ch = map.channels;
    let mut out = vec![0.0; ch];
    for k in 0..4 {
        let t = taps.idx[k];
        for c in 0..ch {
            out[c] += taps.w[k] * map.data[t * ch + c] as f64;
        }
    }
    out
}

#[inline]
pub(crate) fn sample_rgb(map: &CubeMap, taps: &Taps) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..4 {
        let t = taps.idx[k] * 3;
        for c in 0..3 {
            out[c] += taps.w[k] * map.data[t + c] as f64;
        }
    }
    out
}

/// Radiance = exp(raw) for a learned light.
pub fn activate_light(raw: &CubeMap) -> CubeMap {
    raw.map(|v| (v as f64).exp() as f32)
}

/// Mip pyramid of GGX-prefiltered radiance.
#[derive(Debug, Clone)]
pub struct PrefilteredEnv {
    pub levels: Vec<CubeMap>,
    pub roughness: Vec<f64>,
}

/// Resolution of prefilter level `level` for a base resolution.
pub fn level_res(base: usize, level: usize) -> usize {
    (base >> level).max(8).min(base)
}

/// Roughness assigned to each of `levels` levels: linear from 0 to 1.
pub fn level_roughness(levels: usize) -> Vec<f64> {
    (0..levels)
        .map(|l| l as f64 / (levels - 1) as f64)
        .collect()
}

#[derive(Debug)]
struct Csr {
    offsets: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// The prefilter as a fixed sparse linear map from base radiance to each
/// level. Level `l >= 1` first box-filters the base to the level resolution
/// and then averages GGX-distributed reflection samples weighted by n.l.
/// Sample directions come from a Hammersley set, so the map is
/// deterministic and its adjoint is the transposed scatter.
#[derive(Debug)]
pub struct PrefilterOperator {
    pub base_res: usize,
    pub levels: usize,
    pub samples: usize,
    level_res: Vec<usize>,
    rows: Vec<Csr>,
}

impl PrefilterOperator {
    pub fn new(base_res: usize, levels: usize, samples: usize) -> Result<Self> {
        if levels < 4 {
            return Err(Error::invalid(format!(
                "prefilter needs at least 4 levels, got {levels}"
            )));
        }
        if !base_res.is_power_of_two() || base_res < 8 {
            return Err(Error::invalid(format!(
                "cubemap resolution must be a power of two >= 8, got {base_res}"
            )));
        }
        if samples == 0 {
            return Err(Error::invalid("prefilter needs at least one sample"));
        }
        let rough = level_roughness(levels);
        let level_res: Vec<usize> = (0..levels).map(|l| level_res(base_res, l)).collect();
        let mut rows = Vec::with_capacity(levels);
        rows.push(Csr {
            offsets: vec![0],
            cols: vec![],
            vals: vec![],
        });
        for l in 1..levels {
            let res = level_res[l];
            let a = (rough[l] * rough[l]).max(A_MIN);
            let table = texel_table(res);
            let per_row: Vec<Vec<(u32, f64)>> = table
                .dirs
                .par_iter()
                .map(|n| {
                    let (tx, ty) = tangent_frame(n);
                    let mut acc: Vec<(u32, f64)> = Vec::with_capacity(samples * 4);
                    let mut wsum = 0.0;
                    for s in 0..samples {
                        let xi = hammersley(s as u32, samples as u32);
                        let hl = sample_ggx_half(xi, a);
                        let h = tx * hl.x + ty * hl.y + n * hl.z;
                        let ldir = h * (2.0 * n.dot(&h)) - n;
                        let nol = n.dot(&ldir);
                        if nol <= 0.0 {
                            continue;
                        }
                        wsum += nol;
                        let taps = bilinear_taps(res, &ldir);
                        for k in 0..4 {
                            if taps.w[k] != 0.0 {
                                acc.push((taps.idx[k] as u32, nol * taps.w[k]));
                            }
                        }
                    }
                    acc.sort_by_key(|e| e.0);
                    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(acc.len());
                    for (c, v) in acc {
                        match merged.last_mut() {
                            Some(last) if last.0 == c => last.1 += v,
                            _ => merged.push((c, v)),
                        }
                    }
                    for e in merged.iter_mut() {
                        e.1 /= wsum;
                    }
                    merged
                })
                .collect();
            let mut csr = Csr {
                offsets: Vec::with_capacity(per_row.len() + 1),
                cols: Vec::new(),
                vals: Vec::new(),
            };
            csr.offsets.push(0);
            for row in per_row {
                for (c, v) in row {
                    csr.cols.push(c);
                    csr.vals.push(v);
                }
                csr.offsets.push(csr.cols.len() as u32);
            }
            rows.push(csr);
        }
        Ok(Self {
            base_res,
            levels,
            samples,
            level_res,
            rows,
        })
    }

    /// Shared operator for the given parameters, built on first use.
    pub fn cached(base_res: usize, levels: usize, samples: usize) -> Result<Arc<Self>> {
        type Key = (usize, usize, usize);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<PrefilterOperator>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let key = (base_res, levels, samples);
        if let Some(op) = cache.lock().unwrap().get(&key) {
            return Ok(op.clone());
        }
        let op = Arc::new(Self::new(base_res, levels, samples)?);
        cache.lock().unwrap().insert(key, op.clone());
        Ok(op)
    }

    pub fn level_res(&self) -> &[usize] {
        &self.level_res
    }

    pub fn apply(&self, base: &CubeMap) -> PrefilteredEnv {
        assert_eq!(base.res, self.base_res, "prefilter resolution mismatch");
        let ch = base.channels;
        let mut levels = Vec::with_capacity(self.levels);
        levels.push(base.clone());
        for l in 1..self.levels {
            let res = self.level_res[l];
            let src = downsample(base, res);
            let csr = &self.rows[l];
            let mut out = CubeMap::new(res, ch);
            out.data
                .par_chunks_mut(ch)
                .enumerate()
                .for_each(|(t, px)| {
                    let (a, b) = (csr.offsets[t] as usize, csr.offsets[t + 1] as usize);
                    let mut acc = [0.0f64; 4];
                    for e in a..b {
                        let s = csr.cols[e] as usize * ch;
                        for c in 0..ch {
                            acc[c] += csr.vals[e] * src.data[s + c] as f64;
                        }
                    }
                    for c in 0..ch {
                        px[c] = acc[c] as f32;
                    }
                });
            levels.push(out);
        }
        PrefilteredEnv {
            levels,
            roughness: level_roughness(self.levels),
        }
    }

    /// Pulls gradients on every level back to the base radiance. `grads[l]`
    /// holds `texels(l) * channels` values.
    pub fn adjoint(&self, grads: &[Vec<f64>], channels: usize) -> Vec<f64> {
        let mut base = grads[0].clone();
        for l in 1..self.levels {
            let res = self.level_res[l];
            let csr = &self.rows[l];
            let mut gsrc = vec![0.0; FACES * res * res * channels];
            let g = &grads[l];
            for t in 0..csr.offsets.len() - 1 {
                let gt = &g[t * channels..(t + 1) * channels];
                if gt.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for e in csr.offsets[t] as usize..csr.offsets[t + 1] as usize {
                    let s = csr.cols[e] as usize * channels;
                    for c in 0..channels {
                        gsrc[s + c] += csr.vals[e] * gt[c];
                    }
                }
            }
            downsample_adjoint(&gsrc, res, self.base_res, channels, &mut base);
        }
        base
    }
}

/// Box filter from `map.res` down to `res` (a divisor of it).
pub fn downsample(map: &CubeMap, res: usize) -> CubeMap {
    if res == map.res {
        return map.clone();
    }
    let f = map.res / res;
    let ch = map.channels;
    let inv = 1.0 / (f * f) as f64;
    let mut out = CubeMap::new(res, ch);
    for face in 0..FACES {
        for j in 0..res {
            for i in 0..res {
                let mut acc = [0.0f64; 4];
                for dj in 0..f {
                    for di in 0..f {
                        let t = map.texel_index(face, i * f + di, j * f + dj);
                        for c in 0..ch {
                            acc[c] += map.data[t * ch + c] as f64;
                        }
                    }
                }
                let o = out.texel_index(face, i, j);
                for c in 0..ch {
                    out.data[o * ch + c] = (acc[c] * inv) as f32;
                }
            }
        }
    }
    out
}

fn downsample_adjoint(g: &[f64], res: usize, base_res: usize, ch: usize, out: &mut [f64]) {
    let f = base_res / res;
    let inv = 1.0 / (f * f) as f64;
    for face in 0..FACES {
        for j in 0..base_res {
            for i in 0..base_res {
                let coarse = (face * res + j / f) * res + i / f;
                let fine = (face * base_res + j) * base_res + i;
                for c in 0..ch {
                    out[fine * ch + c] += g[coarse * ch + c] * inv;
                }
            }
        }
    }
}

/// Builds the prefiltered pyramid of `map`.
pub fn prefilter(map: &CubeMap, levels: usize, samples: usize) -> Result<PrefilteredEnv> {
    let op = PrefilterOperator::cached(map.res, levels, samples)?;
    Ok(op.apply(map))
}

/// One specular lookup with everything the backward pass needs.
#[derive(Debug, Clone, Copy)]
pub struct SpecularSample {
    pub value: [f64; 3],
    /// d value[c] / d dir[a]
    pub d_dir: [[f64; 3]; 3],
    pub d_rough: [f64; 3],
    pub lo: usize,
    pub frac: f64,
    pub taps_lo: Taps,
    pub taps_hi: Taps,
}

/// Trilinear lookup (bilinear per face, linear between the two levels that
/// bracket `r`) with derivatives.
pub fn specular_sample(env: &PrefilteredEnv, dir: &Vec3, r: f64) -> SpecularSample {
    let nl = env.levels.len();
    let span = (nl - 1) as f64;
    let rc = r.clamp(0.0, 1.0);
    let lf = rc * span;
    let lo = (lf.floor() as usize).min(nl - 2);
    let frac = lf - lo as f64;
    let taps_lo = bilinear_taps(env.levels[lo].res, dir);
    let taps_hi = bilinear_taps(env.levels[lo + 1].res, dir);
    let a = sample_rgb(&env.levels[lo], &taps_lo);
    let b = sample_rgb(&env.levels[lo + 1], &taps_hi);
    let mut value = [0.0; 3];
    let mut d_rough = [0.0; 3];
    let mut d_dir = [[0.0; 3]; 3];
    let in_range = r > 0.0 && r < 1.0;
    for c in 0..3 {
        value[c] = (1.0 - frac) * a[c] + frac * b[c];
        if in_range {
            d_rough[c] = (b[c] - a[c]) * span;
        }
    }
    for (taps, map, wt) in [
        (&taps_lo, &env.levels[lo], 1.0 - frac),
        (&taps_hi, &env.levels[lo + 1], frac),
    ] {
        for k in 0..4 {
            let t = taps.idx[k] * 3;
            for c in 0..3 {
                let v = wt * map.data[t + c] as f64;
                for ax in 0..3 {
                    d_dir[c][ax] += v * taps.dw[k][ax];
                }
            }
        }
    }
    SpecularSample {
        value,
        d_dir,
        d_rough,
        lo,
        frac,
        taps_lo,
        taps_hi,
    }
}

/// Prefiltered radiance in reflection direction `reflect_dir` at roughness `r`.
pub fn specular_lookup(env: &PrefilteredEnv, reflect_dir: &Vec3, r: f64) -> [f64; 3] {
    specular_sample(env, reflect_dir, r).value
}

/// Neutral-white regularizer: mean over texels of sum_i |l_i - mean(l)|.
pub fn light_white_loss(map: &CubeMap) -> f64 {
    light_white_loss_grad(map).0
}

/// Loss value and gradient w.r.t. every texel channel of an RGB map.
pub fn light_white_loss_grad(map: &CubeMap) -> (f64, Vec<f64>) {
    assert_eq!(map.channels, 3, "white loss needs an RGB map");
    let n = map.texel_count();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; map.data.len()];
    for t in 0..n {
        let l = [
            map.data[3 * t] as f64,
            map.data[3 * t + 1] as f64,
            map.data[3 * t + 2] as f64,
        ];
        let mu = (l[0] + l[1] + l[2]) / 3.0;
        let mut sgn = [0.0; 3];
        for c in 0..3 {
            let d = l[c] - mu;
            loss += d.abs();
            sgn[c] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        let mean_sgn = (sgn[0] + sgn[1] + sgn[2]) / 3.0;
        for c in 0..3 {
            grad[3 * t + c] = (sgn[c] - mean_sgn) * inv;
        }
    }
    (loss * inv, grad)
}

/// Order-3 SH coefficients of each RGB channel of the light.
pub fn project_light_sh(map: &CubeMap) -> Result<[[f64; 9]; 3]> {
    let sh = crate::sh::project_cubemap_to_sh(map, 3)?;
    let mut out = [[0.0; 9]; 3];
    for c in 0..3 {
        out[c].copy_from_slice(&sh[c].coeffs);
    }
    Ok(out)
}

/// Adjoint of [`project_light_sh`]: accumulates gradient on texels.
pub fn project_light_sh_adjoint(res: usize, grad_sh: &[[f64; 9]; 3], out: &mut [f64]) {
    let table = texel_table(res);
    for t in 0..table.len() {
        let w = table.solid_angle[t];
        let b = &table.basis[t];
        for c in 0..3 {
            let mut g = 0.0;
            for i in 0..9 {
                g += grad_sh[c][i] * b[i];
            }
            out[3 * t + c] += g * w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::{cosine_lobe, project_cubemap_to_sh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let s = (1.0 - z * z).sqrt();
        Vec3::new(s * phi.cos(), s * phi.sin(), z)
    }

    #[test]
    fn face_mapping_round_trips() {
        let res = 16;
        for f in 0..FACES {
            for j in 0..res {
                for i in 0..res {
                    let d = texel_dir(res, f, i, j);
                    let (face, u, v) = dir_to_face_uv(&d);
                    assert_eq!(face, f);
                    let ii = ((u + 1.0) * 0.5 * res as f64 - 0.5).round() as usize;
                    let jj = ((v + 1.0) * 0.5 * res as f64 - 0.5).round() as usize;
                    assert_eq!((ii, jj), (i, j));
                }
            }
        }
    }

    #[test]
    fn solid_angles_sum_to_sphere() {
        for res in [4, 8, 32] {
            let t = texel_table(res);
            let s: f64 = t.solid_angle.iter().sum();
            assert!((s - 4.0 * PI).abs() < 4.0 * PI * 1e-3 * 1e-3, "{res}: {s}");
        }
    }

    #[test]
    fn sampling_basics() {
        let c = CubeMap::constant(8, &[0.25, 0.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let v = sample_dir(&c, &random_dir(&mut rng));
            assert!((v[0] - 0.25).abs() < 1e-6 && (v[2] - 2.0).abs() < 1e-6);
        }
        let mut m = CubeMap::new(8, 1);
        for (k, v) in m.data.iter_mut().enumerate() {
            *v = k as f32;
        }
        let d = texel_dir(8, 3, 2, 5);
        let t = m.texel_index(3, 2, 5);
        assert!((sample_dir(&m, &d)[0] - t as f64).abs() < 1e-4);

        let zmap = CubeMap::from_fn(128, 1, |d| vec![d.z]);
        let up = sample_dir(&zmap, &Vec3::z())[0];
        let down = sample_dir(&zmap, &-Vec3::z())[0];
        assert!((up + down).abs() < 1e-3);
    }

    #[test]
    fn tap_derivatives_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = CubeMap::new(16, 1);
        for v in map.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for _ in 0..20 {
            let d = random_dir(&mut rng);
            let taps = bilinear_taps(16, &d);
            let mut grad = [0.0; 3];
            for k in 0..4 {
                for a in 0..3 {
                    grad[a] += taps.dw[k][a] * map.data[taps.idx[k]] as f64;
                }
            }
            for a in 0..3 {
                let h = 1e-7;
                let mut dp = d;
                let mut dm = d;
                dp[a] += h;
                dm[a] -= h;
                if major_face(&dp) != major_face(&dm) {
                    continue;
                }
                let fd = (sample_dir(&map, &dp)[0] - sample_dir(&map, &dm)[0]) / (2.0 * h);
                assert!((fd - grad[a]).abs() < 1e-4 * (1.0 + fd.abs()), "{fd} vs {}", grad[a]);
            }
        }
    }

    #[test]
    fn constant_projection_is_dc_only() {
        let c = CubeMap::constant(16, &[1.0]);
        let sh = project_cubemap_to_sh(&c, 3).unwrap();
        assert!((sh[0].coeffs[0] - 2.0 * PI.sqrt()).abs() < 1e-9);
        for i in 1..9 {
            assert!(sh[0].coeffs[i].abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!((sh[0].eval(&random_dir(&mut rng)) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn clamped_cosine_projection_matches_zonal_expansion() {
        let m = CubeMap::from_fn(64, 1, |d| vec![d.z.max(0.0)]);
        let sh = project_cubemap_to_sh(&m, 3).unwrap();
        let expect = cosine_lobe(&Vec3::z());
        for i in 0..9 {
            let got = sh[0].coeffs[i];
            if expect[i].abs() > 1e-9 {
                assert!((got - expect[i]).abs() <= 0.01 * expect[i].abs(), "{i}");
            } else {
                assert!(got.abs() < 1e-3, "{i}: {got}");
            }
        }
    }

    #[test]
    fn projection_rejects_non_finite() {
        let mut m = CubeMap::constant(8, &[1.0]);
        m.data[10] = f32::NAN;
        assert!(project_cubemap_to_sh(&m, 3).is_err());
    }

    #[test]
    fn prefilter_constant_map_is_constant() {
        let c = CubeMap::constant(32, &[0.7, 1.0, 3.0]);
        let env = prefilter(&c, 5, 64).unwrap();
        assert_eq!(env.levels.len(), 5);
        for lvl in &env.levels {
            for t in lvl.data.chunks_exact(3) {
                assert!((t[0] - 0.7).abs() < 1e-4 && (t[2] - 3.0).abs() < 1e-4);
            }
        }
        let res: Vec<usize> = env.levels.iter().map(|l| l.res).collect();
        assert_eq!(res, vec![32, 16, 8, 8, 8]);
    }

    #[test]
    fn prefilter_resolution_chain_for_default_light() {
        let op = PrefilterOperator::cached(128, 5, 8).unwrap();
        assert_eq!(op.level_res(), &[128, 64, 32, 16, 8]);
        assert!(PrefilterOperator::new(128, 3, 8).is_err());
    }

    #[test]
    fn prefilter_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = CubeMap::new(32, 3);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        let env = prefilter(&m, 5, 256).unwrap();
        let e0 = env.levels[0].weighted_mean();
        for lvl in &env.levels[1..] {
            let e = lvl.weighted_mean();
            for c in 0..3 {
                assert!((e[c] - e0[c]).abs() < 0.03 * e0[c]);
            }
        }
    }

    #[test]
    fn prefilter_wide_lobe_is_near_cosine_average() {
        // Smooth map; oracle: cosine-weighted hemisphere average around each
        // texel direction, by brute-force quadrature over the base texels.
        let m = CubeMap::from_fn(32, 1, |d| vec![1.0 + 0.5 * d.x + 0.3 * d.z * d.z]);
        let env = prefilter(&m, 5, 1024).unwrap();
        let top = env.levels.last().unwrap();
        let base = texel_table(32);
        let tt = texel_table(top.res);
        let mean = m.weighted_mean()[0];
        for (t, n) in tt.dirs.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, d) in base.dirs.iter().enumerate() {
                let c = n.dot(d).max(0.0) * base.solid_angle[k];
                num += c * m.data[k] as f64;
                den += c;
            }
            let oracle = num / den;
            assert!((top.data[t] as f64 - oracle).abs() < 0.1 * mean);
        }
    }

    #[test]
    fn prefilter_keeps_peak_on_axis() {
        let res = 32;
        let mut m = CubeMap::constant(res, &[0.0]);
        for (j, i) in [(15, 15), (15, 16), (16, 15), (16, 16)] {
            let t = m.texel_index(4, i, j);
            m.data[t] = 100.0;
        }
        let env = PrefilterOperator::new(res, 5, 512).unwrap().apply(&m);
        let table = texel_table(64);
        let mut best = (f64::MIN, Vec3::z());
        for d in &table.dirs {
            let v = specular_sample_scalar(&env, d, 0.2);
            if v > best.0 {
                best = (v, *d);
            }
        }
        let angle = best.1.dot(&Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 3.0, "peak {angle} deg off axis");
    }

    fn specular_sample_scalar(env: &PrefilteredEnv, d: &Vec3, r: f64) -> f64 {
        let nl = env.levels.len();
        let lf = r * (nl - 1) as f64;
        let lo = (lf.floor() as usize).min(nl - 2);
        let f = lf - lo as f64;
        (1.0 - f) * sample_dir(&env.levels[lo], d)[0] + f * sample_dir(&env.levels[lo + 1], d)[0]
    }

    #[test]
    fn specular_lookup_levels_and_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = CubeMap::new(32, 3);
        for v in m.data.iter_mut() {
            *v = if rng.gen_bool(0.5) { 2.0 } else { 0.0 };
        }
        let env = prefilter(&m, 5, 1024).unwrap();
        let d = random_dir(&mut rng);
        let l0 = sample_dir(&env.levels[0], &d);
        let s0 = specular_lookup(&env, &d, 0.0);
        for c in 0..3 {
            assert!((l0[c] - s0[c]).abs() < 1e-12);
        }
        let l2 = sample_dir(&env.levels[2], &d);
        let s2 = specular_lookup(&env, &d, 0.5);
        for c in 0..3 {
            assert!((l2[c] - s2[c]).abs() < 1e-12);
        }
        let dirs: Vec<Vec3> = (0..100).map(|_| random_dir(&mut rng)).collect();
        let mut prev = f64::INFINITY;
        for r in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let vals: Vec<f64> = dirs.iter().map(|d| specular_lookup(&env, d, r)[0]).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(var <= prev + 1e-9, "variance rose at r={r}: {var} > {prev}");
            prev = var;
        }
    }

    #[test]
    fn white_loss_examples() {
        let gray = CubeMap::constant(4, &[0.3, 0.3, 0.3]);
        assert_eq!(light_white_loss(&gray), 0.0);
        let red = CubeMap::constant(4, &[1.0, 0.0, 0.0]);
        assert!((light_white_loss(&red) - 4.0 / 3.0).abs() < 1e-6);
        let red3 = red.map(|v| 3.0 * v);
        assert!((light_white_loss(&red3) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn prefilter_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let op = PrefilterOperator::new(16, 4, 32).unwrap();
        let mut x = CubeMap::new(16, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let y = op.apply(&x);
        let g: Vec<Vec<f64>> = y
            .levels
            .iter()
            .map(|l| (0..l.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let lhs: f64 = y
            .levels
            .iter()
            .zip(&g)
            .map(|(l, g)| l.data.iter().zip(g).map(|(a, b)| *a as f64 * b).sum::<f64>())
            .sum();
        let gx = op.adjoint(&g, 3);
        let rhs: f64 = x.data.iter().zip(&gx).map(|(a, b)| *a as f64 * b).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
