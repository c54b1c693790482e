//! Baked visibility: a regular grid of order-3 SH expansions of the
//! transmittance seen from each grid point, queried trilinearly.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::Gaussian;
use crate::sh::{project_cubemap_to_sh, ShVector};
use crate::splat::{render_opacity_cubemap, ALPHA_MIN};

/// SH of the constant function 1.
pub const UNOCCLUDED: [f64; 9] = [2.0 * 1.772_453_850_905_516, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Grid points sit at the corners of the cells: point (i, j, k) is at
/// `min + (i, j, k) * (max - min) / (dims - 1)`. Stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityGrid {
    pub min: Vec3,
    pub max: Vec3,
    pub dims: [usize; 3],
    pub cells: Vec<[f32; 9]>,
}

impl VisibilityGrid {
    pub fn new(min: Vec3, max: Vec3, dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|d| *d < 2) {
            return Err(Error::invalid(format!("visibility grid needs >= 2 points per axis, got {dims:?}")));
        }
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(Error::invalid("visibility grid box is empty"));
        }
        let unocc = UNOCCLUDED.map(|v| v as f32);
        Ok(Self {
            min,
            max,
            dims,
            cells: vec![unocc; dims[0] * dims[1] * dims[2]],
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        Vec3::from_fn(|a, _| self.min[a] + (self.max[a] - self.min[a]) * ijk[a] as f64 / (self.dims[a] - 1) as f64)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - 1e-9 && p[a] <= self.max[a] + 1e-9)
    }

    /// Smallest spacing between neighbouring grid points.
    pub fn cell_size(&self) -> f64 {
        (0..3)
            .map(|a| (self.max[a] - self.min[a]) / (self.dims[a] - 1) as f64)
            .fold(f64::INFINITY, f64::min)
    }

    /// Query point for a surface sample at `x` with normal `n`: lifted one
    /// cell along the normal so trilinear weights do not reach the fully
    /// occluded cells behind the surface.
    pub fn surface_point(&self, x: &Vec3, n: &Vec3) -> Vec3 {
        x + n * self.cell_size()
    }

    /// Trilinear query; points outside the box clamp to its boundary.
    pub fn query(&self, x: &Vec3) -> [f64; 9] {
        self.query_grad(x).0
    }

    /// Query with the derivative of each coefficient w.r.t. `x`.
    pub fn query_grad(&self, x: &Vec3) -> ([f64; 9], [[f64; 3]; 9]) {
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        let mut ds = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let span = self.max[a] - self.min[a];
            let u = (x[a] - self.min[a]) / span * (n - 1) as f64;
            let uc = u.clamp(0.0, (n - 1) as f64);
            let i = (uc.floor() as usize).min(n - 2);
            i0[a] = i;
            f[a] = uc - i as f64;
            ds[a] = if u == uc { (n - 1) as f64 / span } else { 0.0 };
        }
        let mut val = [0.0; 9];
        let mut grad = [[0.0; 3]; 9];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut dw = [1.0; 3];
            for a in 0..3 {
                let wa = if o[a] == 1 { f[a] } else { 1.0 - f[a] };
                let dwa = if o[a] == 1 { 1.0 } else { -1.0 } * ds[a];
                w *= wa;
                for b in 0..3 {
                    dw[b] *= if a == b { dwa } else { wa };
                }
            }
            let cell = &self.cells[self.index(i0[0] + o[0], i0[1] + o[1], i0[2] + o[2])];
            for c in 0..9 {
                let v = cell[c] as f64;
                val[c] += w * v;
                for b in 0..3 {
                    grad[c][b] += dw[b] * v;
                }
            }
        }
        (val, grad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(40 + self.cells.len() * 36);
        buf.extend_from_slice(b"VISG");
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.min.iter().chain(self.max.iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for c in &self.cells {
            for v in c {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 40 || &buf[0..4] != b"VISG" {
            return Err(Error::format(path, 0, "missing VISG magic or short header"));
        }
        let word = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let dims = [word(4) as usize, word(8) as usize, word(12) as usize];
        if dims.iter().any(|d| *d < 2) {
            return Err(Error::format(path, 4, format!("bad grid dims {dims:?}")));
        }
        let fl = |o: usize| f32::from_bits(word(o)) as f64;
        let min = Vec3::new(fl(16), fl(20), fl(24));
        let max = Vec3::new(fl(28), fl(32), fl(36));
        let n = dims[0] * dims[1] * dims[2];
        let need = 40 + n * 36;
        if buf.len() != need {
            return Err(Error::format(
                path,
                buf.len().min(need) as u64,
                format!("expected {need} bytes, found {}", buf.len()),
            ));
        }
        let cells = buf[40..]
            .chunks_exact(36)
            .map(|c| {
                let mut v = [0.0f32; 9];
                for (k, b) in c.chunks_exact(4).enumerate() {
                    v[k] = f32::from_le_bytes(b.try_into().unwrap());
                }
                v
            })
            .collect();
        Ok(Self { min, max, dims, cells })
    }
}

pub fn query_visibility(grid: &VisibilityGrid, x: &Vec3) -> ShVector {
    ShVector {
        order: 3,
        coeffs: grid.query(x).to_vec(),
    }
}

/// Box around the Gaussian centers, padded on every side by 5% of the
/// largest extent (10% growth overall).
pub fn grid_bounds(gaussians: &[Gaussian]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for g in gaussians {
        let p = g.position();
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    if gaussians.is_empty() {
        lo = Vec3::repeat(-1.0);
        hi = Vec3::repeat(1.0);
    }
    let ext = (hi - lo).max().max(1e-3);
    let pad = Vec3::repeat(0.05 * ext);
    (lo - pad, hi + pad)
}

/// Order-3 SH of the transmittance seen from `x`.
pub fn visibility_at(gaussians: &[Gaussian], x: &Vec3, face_res: usize) -> Result<[f64; 9]> {
    let map = render_opacity_cubemap(gaussians, x, face_res)?;
    let sh = project_cubemap_to_sh(&map, 3)?;
    let mut out = [0.0; 9];
    out.copy_from_slice(&sh[0].coeffs);
    Ok(out)
}

/// Fills a grid from a per-point visibility function, in parallel.
pub fn bake_with(
    min: Vec3,
    max: Vec3,
    dims: [usize; 3],
    f: impl Fn(&Vec3) -> Result<[f64; 9]> + Sync,
) -> Result<VisibilityGrid> {
    let mut grid = VisibilityGrid::new(min, max, dims)?;
    let n = grid.cells.len();
    let cells: Result<Vec<[f32; 9]>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            Ok(f(&grid.point(i, j, k))?.map(|v| v as f32))
        })
        .collect();
    grid.cells = cells?;
    Ok(grid)
}

/// Bakes the transmittance of `gaussians` over a grid around them.
pub fn bake_visibility(gaussians: &[Gaussian], dims: [usize; 3], face_res: usize) -> Result<VisibilityGrid> {
    let (min, max) = grid_bounds(gaussians);
    // Nothing can occlude: every point sees the full sphere.
    if gaussians.iter().all(|g| g.opacity() < ALPHA_MIN) {
        if face_res < 16 {
            return Err(Error::invalid(format!("cube face resolution must be >= 16, got {face_res}")));
        }
        return VisibilityGrid::new(min, max, dims);
    }
    bake_with(min, max, dims, |x| visibility_at(gaussians, x, face_res))
}
