//! Gaussian scene container: raw parameters, activations, initialization and
//! the binary scene format.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::envlight::CubeMap;
use crate::error::{Error, Result};
use crate::math::{logit, quat_normalize, quat_to_mat, sigmoid, Mat3, Vec3};
use crate::sh::K00;
use crate::train::Stage;
use crate::visibility::VisibilityGrid;

pub const POS: usize = 0;
pub const ROT: usize = 3;
pub const LOG_SCALE: usize = 7;
pub const OPACITY: usize = 10;
pub const ALBEDO: usize = 11;
pub const ROUGH: usize = 14;
pub const METAL: usize = 15;
/// 16 coefficients x 3 channels, coefficient-major.
pub const SH: usize = 16;
pub const ALPHA: usize = 64;
/// Floats per Gaussian.
pub const PARAMS: usize = 65;

/// Raw alpha that activates to exactly zero.
pub const ALPHA_OFF: f32 = -1.0e4;
/// Raw alpha whose activation is exactly 1.
pub const ALPHA_ON: f32 = 1.0e4;

/// One Gaussian as raw (pre-activation) parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub raw: [f32; PARAMS],
}

impl Default for Gaussian {
    fn default() -> Self {
        let mut raw = [0.0; PARAMS];
        raw[ROT] = 1.0;
        raw[ALPHA] = ALPHA_OFF;
        Self { raw }
    }
}

impl Gaussian {
    #[inline]
    fn f(&self, i: usize) -> f64 {
        self.raw[i] as f64
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.f(POS), self.f(POS + 1), self.f(POS + 2))
    }

    pub fn set_position(&mut self, p: &Vec3) {
        for a in 0..3 {
            self.raw[POS + a] = p[a] as f32;
        }
    }

    pub fn raw_rotation(&self) -> [f64; 4] {
        [self.f(ROT), self.f(ROT + 1), self.f(ROT + 2), self.f(ROT + 3)]
    }

    /// Unit rotation quaternion (w, x, y, z).
    pub fn rotation(&self) -> [f64; 4] {
        quat_normalize(self.raw_rotation()).0
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat(self.rotation())
    }

    pub fn scale(&self) -> Vec3 {
        Vec3::new(
            self.f(LOG_SCALE).exp(),
            self.f(LOG_SCALE + 1).exp(),
            self.f(LOG_SCALE + 2).exp(),
        )
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.f(OPACITY))
    }

    pub fn albedo(&self) -> [f64; 3] {
        [
            sigmoid(self.f(ALBEDO)),
            sigmoid(self.f(ALBEDO + 1)),
            sigmoid(self.f(ALBEDO + 2)),
        ]
    }

    pub fn roughness(&self) -> f64 {
        sigmoid(self.f(ROUGH))
    }

    pub fn metallic(&self) -> f64 {
        sigmoid(self.f(METAL))
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.f(ALPHA))
    }

    /// SH coefficient `k` of channel `c`.
    #[inline]
    pub fn sh(&self, k: usize, c: usize) -> f64 {
        self.f(SH + 3 * k + c)
    }

    /// Renormalizes the stored quaternion in place.
    pub fn normalize_rotation(&mut self) {
        let (q, _) = quat_normalize(self.raw_rotation());
        for i in 0..4 {
            self.raw[ROT + i] = q[i] as f32;
        }
    }
}

/// Index of the shortest axis; ties prefer z, then y, then x.
pub fn shortest_axis(scale: &Vec3) -> usize {
    let mut k = 2;
    if scale[1] < scale[k] {
        k = 1;
    }
    if scale[0] < scale[k] {
        k = 0;
    }
    k
}

/// Shortest axis of the Gaussian, flipped to face `cam_pos`. Also returns
/// the axis index and the sign applied.
pub fn gaussian_normal_ext(g: &Gaussian, cam_pos: &Vec3) -> (Vec3, usize, f64) {
    let k = shortest_axis(&g.scale());
    let axis: Vec3 = g.rotation_matrix().column(k).into();
    let sign = if axis.dot(&(cam_pos - g.position())) < 0.0 {
        -1.0
    } else {
        1.0
    };
    (axis * sign, k, sign)
}

pub fn gaussian_normal(g: &Gaussian, cam_pos: &Vec3) -> Vec3 {
    gaussian_normal_ext(g, cam_pos).0
}

pub fn gaussian_depth(g: &Gaussian, cam_pos: &Vec3) -> f64 {
    (g.position() - cam_pos).norm()
}

/// Sphere restricting distillation to foreground content.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSphere {
    pub center: Vec3,
    pub radius: f64,
}

impl DomainSphere {
    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.center).norm() <= self.radius
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    /// Learned light as raw log-radiance; radiance is `exp(raw)`.
    pub light: CubeMap,
    pub visibility: Option<VisibilityGrid>,
    pub domain: Option<DomainSphere>,
    /// Last training stage run to completion.
    pub completed: Option<Stage>,
}

/// Initialization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub opacity: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub metallic: f64,
    pub light_res: usize,
    /// Initial light radiance (uniform gray).
    pub light_value: f64,
    /// Orient each Gaussian along the local point-cloud plane and flatten it,
    /// instead of an isotropic start.
    pub flatten: bool,
    pub neighbors: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            albedo: 0.99,
            roughness: 0.99,
            metallic: 0.99,
            light_res: 128,
            light_value: 0.5,
            flatten: false,
            neighbors: 8,
        }
    }
}

/// Indices of the `k` nearest neighbours of every point (brute force).
fn knn(points: &[Vec3], k: usize) -> Vec<Vec<(usize, f64)>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if best.len() < k || d < best[best.len() - 1].1 {
                    let pos = best.partition_point(|e| e.1 <= d);
                    best.insert(pos, (j, d));
                    best.truncate(k);
                }
            }
            best.into_iter().map(|(j, d)| (j, d.sqrt())).collect()
        })
        .collect()
}

/// Quaternion (w, x, y, z) rotating +z onto unit `n`.
fn quat_from_z(n: &Vec3) -> [f64; 4] {
    let z = Vec3::z();
    let d = z.dot(n);
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let c = z.cross(n);
    let q = [1.0 + d, c.x, c.y, c.z];
    quat_normalize(q).0
}

/// One Gaussian per point, with optional per-point colors for the SH DC band.
pub fn init_scene(points: &[Vec3], colors: Option<&[[f64; 3]]>, cfg: &InitConfig) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::invalid("cannot initialize a scene from zero points"));
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} colors for {} points",
                c.len(),
                points.len()
            )));
        }
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("non-finite point coordinates"));
    }
    let k = cfg.neighbors.max(3).min(points.len().saturating_sub(1));
    let nn = if k > 0 { knn(points, k) } else { vec![vec![]] };
    let gaussians = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = Gaussian::default();
            g.set_position(p);
            let nbrs = &nn[i];
            let near = &nbrs[..nbrs.len().min(3)];
            let s = if near.is_empty() {
                0.01
            } else {
                (near.iter().map(|e| e.1).sum::<f64>() / near.len() as f64).max(1e-7)
            };
            let mut log_s = [s.ln(); 3];
            if cfg.flatten && nbrs.len() >= 3 {
                let mean = nbrs.iter().fold(*p, |acc, e| acc + points[e.0]) / (nbrs.len() + 1) as f64;
                let mut cov = Mat3::zeros();
                for q in nbrs.iter().map(|e| points[e.0]).chain(std::iter::once(*p)) {
                    let d = q - mean;
                    cov += d * d.transpose();
                }
                let eig = cov.symmetric_eigen();
                let imin = eig.eigenvalues.imin();
                let n: Vec3 = eig.eigenvectors.column(imin).into();
                let q = quat_from_z(&n.normalize());
                for a in 0..4 {
                    g.raw[ROT + a] = q[a] as f32;
                }
                log_s[2] = (0.1 * s).ln();
            }
            for a in 0..3 {
                g.raw[LOG_SCALE + a] = log_s[a] as f32;
            }
            g.raw[OPACITY] = logit(cfg.opacity) as f32;
            for c in 0..3 {
                g.raw[ALBEDO + c] = logit(cfg.albedo) as f32;
                let col = colors.map(|cs| cs[i][c]).unwrap_or(0.5);
                g.raw[SH + c] = ((col - 0.5) / K00) as f32;
            }
            g.raw[ROUGH] = logit(cfg.roughness) as f32;
            g.raw[METAL] = logit(cfg.metallic) as f32;
            g.raw[ALPHA] = ALPHA_OFF;
            g
        })
        .collect();
    let light = CubeMap::constant(cfg.light_res, &[cfg.light_value.ln() as f32; 3]);
    Ok(Scene {
        gaussians,
        light,
        visibility: None,
        domain: None,
        completed: None,
    })
}

const MAGIC: &[u8; 4] = b"PRDS";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_DOMAIN: u32 = 1;
const STAGE_SHIFT: u32 = 8;

/// Directory holding the raw light next to a scene file.
pub fn light_dir(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".light");
    PathBuf::from(s)
}

/// Visibility cache next to a scene file.
pub fn visibility_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vis");
    PathBuf::from(s)
}

impl Scene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Activated light radiance.
    pub fn light_radiance(&self) -> CubeMap {
        crate::envlight::activate_light(&self.light)
    }

    /// Axis-aligned bounds of the Gaussian centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            let p = g.position();
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }

    /// Writes the scene file, the raw light beside it, and the visibility
    /// grid when present.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::invalid("refusing to save a scene with no Gaussians"));
        }
        let mut flags = 0u32;
        if self.domain.is_some() {
            flags |= FLAG_DOMAIN;
        }
        if let Some(s) = self.completed {
            flags |= (s.index() as u32 + 1) << STAGE_SHIFT;
        }
        let mut buf = Vec::with_capacity(32 + self.gaussians.len() * PARAMS * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.gaussians.len() as u32).to_le_bytes());
        buf.extend_from_slice(&flags.to_le_bytes());
        if let Some(d) = &self.domain {
            for v in [d.center.x, d.center.y, d.center.z, d.radius] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for g in &self.gaussians {
            for v in g.raw {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        crate::io::save_cubemap_pfm(&light_dir(path), &self.light)?;
        let vis = visibility_path(path);
        match &self.visibility {
            Some(grid) => grid.save(&vis)?,
            None => {
                if vis.exists() {
                    std::fs::remove_file(&vis).map_err(|e| Error::io(&vis, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let word = |off: usize| -> Result<u32> {
            buf.get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(path, off as u64, "truncated header"))
        };
        if buf.len() < 4 || &buf[0..4] != MAGIC {
            return Err(Error::format(path, 0, "missing PRDS magic"));
        }
        let version = word(4)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                4,
                format!("unsupported scene version {version} (this build reads {FORMAT_VERSION})"),
            ));
        }
        let count = word(8)? as usize;
        let flags = word(12)?;
        if count == 0 {
            return Err(Error::format(path, 8, "scene holds no Gaussians"));
        }
        let mut off = 16;
        let domain = if flags & FLAG_DOMAIN != 0 {
            let mut v = [0.0f64; 4];
            for x in v.iter_mut() {
                *x = f32::from_bits(word(off)?) as f64;
                off += 4;
            }
            Some(DomainSphere {
                center: Vec3::new(v[0], v[1], v[2]),
                radius: v[3],
            })
        } else {
            None
        };
        let completed = match (flags >> STAGE_SHIFT) & 0xff {
            0 => None,
            s => Some(Stage::from_index(s as usize - 1).ok_or_else(|| {
                Error::format(path, 12, format!("unknown stage code {s} in flags"))
            })?),
        };
        let need = off + count * PARAMS * 4;
        if buf.len() != need {
            return Err(Error::format(
                path,
                buf.len().min(need) as u64,
                format!("expected {need} bytes for {count} Gaussians, found {}", buf.len()),
            ));
        }
        let gaussians = buf[off..]
            .chunks_exact(PARAMS * 4)
            .map(|rec| {
                let mut raw = [0.0f32; PARAMS];
                for (i, c) in rec.chunks_exact(4).enumerate() {
                    raw[i] = f32::from_le_bytes(c.try_into().unwrap());
                }
                Gaussian { raw }
            })
            .collect();
        let light = crate::io::load_cubemap_pfm(&light_dir(path))?;
        let vis = visibility_path(path);
        let visibility = if vis.exists() {
            Some(VisibilityGrid::load(&vis)?)
        } else {
            None
        };
        Ok(Scene {
            gaussians,
            light,
            visibility,
            domain,
            completed,
        })
    }
}
