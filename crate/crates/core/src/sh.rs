//! Real spherical harmonics: basis evaluation, cubemap projection, the order-3
//! triple product and the clamped-cosine (zonal) lobe used for irradiance.
//!
//! Order counts bands: order 3 means l in 0..=2 (9 coefficients), order 4
//! means l in 0..=3 (16 coefficients). Coefficients use the linear index
//! `i = l*l + l + m`. The basis is real and orthonormal with the
//! Condon-Shortley phase omitted, so the l = 1 functions are positive
//! multiples of (y, z, x).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::envlight::{texel_table, CubeMap};
use crate::error::{Error, Result};
use crate::math::{gauss_legendre, is_unit, Vec3};

pub const K00: f64 = 0.282_094_791_773_878_14;
const K1: f64 = 0.488_602_511_902_919_9;
const K2A: f64 = 1.092_548_430_592_079_2;
const K2B: f64 = 0.315_391_565_252_520_05;
const K2C: f64 = 0.546_274_215_296_039_6;
const K3A: f64 = 0.590_043_589_926_643_5;
const K3B: f64 = 2.890_611_442_640_554;
const K3C: f64 = 0.457_045_799_464_465_8;
const K3D: f64 = 0.373_176_332_590_115_4;
const K3E: f64 = 1.445_305_721_320_277;

/// Clamped-cosine zonal weights per band: pi, 2pi/3, pi/4.
pub const COSINE_LOBE_BANDS: [f64; 3] = [PI, 2.0 * PI / 3.0, PI / 4.0];

/// Linear coefficient index of band `l`, order `m`.
#[inline]
pub fn sh_index(l: usize, m: i32) -> usize {
    (l * l + l) as usize + m as isize as usize
}

/// Band of a linear coefficient index.
#[inline]
pub fn sh_band(i: usize) -> usize {
    (i as f64).sqrt().floor() as usize
}

/// Coefficient vector of an SH expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVector {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl ShVector {
    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            coeffs: vec![0.0; order * order],
        }
    }

    pub fn from_coeffs(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        if !(1..=4).contains(&order) || coeffs.len() != order * order {
            return Err(Error::invalid(format!(
                "SH vector of order {order} needs {} coefficients, got {}",
                order * order,
                coeffs.len()
            )));
        }
        Ok(Self { order, coeffs })
    }

    /// Reconstructs the expanded function in direction `dir`.
    pub fn eval(&self, dir: &Vec3) -> f64 {
        let b = basis16(dir);
        self.coeffs.iter().zip(b.iter()).map(|(c, y)| c * y).sum()
    }

    pub fn as_order3(&self) -> Result<[f64; 9]> {
        if self.order != 3 {
            return Err(Error::invalid(format!(
                "expected an order-3 SH vector, got order {}",
                self.order
            )));
        }
        let mut out = [0.0; 9];
        out.copy_from_slice(&self.coeffs);
        Ok(out)
    }
}

/// All 16 basis values (order 4) at `d`. `d` is assumed unit length.
#[inline]
pub fn basis16(d: &Vec3) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        K00,
        K1 * y,
        K1 * z,
        K1 * x,
        K2A * x * y,
        K2A * y * z,
        K2B * (3.0 * zz - 1.0),
        K2A * x * z,
        K2C * (xx - yy),
        K3A * y * (3.0 * xx - yy),
        K3B * x * y * z,
        K3C * y * (5.0 * zz - 1.0),
        K3D * z * (5.0 * zz - 3.0),
        K3C * x * (5.0 * zz - 1.0),
        K3E * z * (xx - yy),
        K3A * x * (xx - 3.0 * yy),
    ]
}

/// The first 9 basis values (order 3).
#[inline]
pub fn basis9(d: &Vec3) -> [f64; 9] {
    let b = basis16(d);
    let mut out = [0.0; 9];
    out.copy_from_slice(&b[..9]);
    out
}

/// Cartesian gradients of the 16 basis polynomials at `d`.
pub fn basis16_grad(d: &Vec3) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, K1, 0.0],
        [0.0, 0.0, K1],
        [K1, 0.0, 0.0],
        [K2A * y, K2A * x, 0.0],
        [0.0, K2A * z, K2A * y],
        [0.0, 0.0, 6.0 * K2B * z],
        [K2A * z, 0.0, K2A * x],
        [2.0 * K2C * x, -2.0 * K2C * y, 0.0],
        [6.0 * K3A * x * y, K3A * (3.0 * xx - 3.0 * yy), 0.0],
        [K3B * y * z, K3B * x * z, K3B * x * y],
        [0.0, K3C * (5.0 * zz - 1.0), 10.0 * K3C * y * z],
        [0.0, 0.0, K3D * (15.0 * zz - 3.0)],
        [K3C * (5.0 * zz - 1.0), 0.0, 10.0 * K3C * x * z],
        [2.0 * K3E * x * z, -2.0 * K3E * y * z, K3E * (xx - yy)],
        [K3A * (3.0 * xx - 3.0 * yy), -6.0 * K3A * x * y, 0.0],
    ]
}

/// Evaluates the real SH basis at a unit direction.
pub fn eval_sh_basis(dir: &Vec3, order: usize) -> Result<Vec<f64>> {
    if !(order == 3 || order == 4) {
        return Err(Error::invalid(format!("SH order must be 3 or 4, got {order}")));
    }
    if !is_unit(dir, 1e-6) {
        return Err(Error::invalid(format!(
            "SH direction must be unit length, |d| = {}",
            dir.norm()
        )));
    }
    Ok(basis16(dir)[..order * order].to_vec())
}

/// Projects every channel of a cubemap onto the SH basis, weighting texels
/// by their exact solid angle.
pub fn project_cubemap_to_sh(map: &CubeMap, order: usize) -> Result<Vec<ShVector>> {
    if !(order == 3 || order == 4) {
        return Err(Error::invalid(format!("SH order must be 3 or 4, got {order}")));
    }
    if let Some(bad) = map.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "cubemap texel value {} at index {bad} is not finite",
            map.data[bad]
        )));
    }
    let table = texel_table(map.res);
    let n = order * order;
    let ch = map.channels;
    let mut out = vec![vec![0.0; n]; ch];
    for t in 0..table.len() {
        let w = table.solid_angle[t];
        let b = &table.basis[t];
        for c in 0..ch {
            let v = map.data[t * ch + c] as f64 * w;
            for i in 0..n {
                out[c][i] += v * b[i];
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|coeffs| ShVector { order, coeffs })
        .collect())
}

/// Sparse, fully permuted table of C_ijk = integral of Y_i Y_j Y_k.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleProductTensor {
    pub order: usize,
    pub entries: Vec<(u16, u16, u16, f64)>,
}

const TENSOR_MAGIC: &[u8; 4] = b"SHC1";

impl TripleProductTensor {
    /// Integrates the products of three basis functions with a Gauss-Legendre
    /// rule in cos(theta) times a uniform rule in phi. The integrand is a
    /// polynomial of degree at most 6, which this rule integrates exactly.
    pub fn build(order: usize) -> Result<Self> {
        if order != 3 {
            return Err(Error::invalid(format!(
                "triple product tensor is only built for order 3, got {order}"
            )));
        }
        let n = order * order;
        let (zs, ws) = gauss_legendre(16);
        let nphi = 32;
        let mut dense = vec![0.0; n * n * n];
        for (z, wz) in zs.iter().zip(&ws) {
            let s = (1.0 - z * z).max(0.0).sqrt();
            for k in 0..nphi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / nphi as f64;
                let d = Vec3::new(s * phi.cos(), s * phi.sin(), *z);
                let w = wz * 2.0 * PI / nphi as f64;
                let b = basis9(&d);
                for i in 0..n {
                    for j in 0..n {
                        let bij = w * b[i] * b[j];
                        for l in 0..n {
                            dense[(i * n + j) * n + l] += bij * b[l];
                        }
                    }
                }
            }
        }
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = dense[(i * n + j) * n + k];
                    if v.abs() >= 1e-12 {
                        entries.push((i as u16, j as u16, k as u16, v));
                    }
                }
            }
        }
        Ok(Self { order, entries })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 as usize == i && e.1 as usize == j && e.2 as usize == k)
            .map_or(0.0, |e| e.3)
    }

    /// p_i = sum_jk C_ijk l_j v_k on fixed-size order-3 arrays.
    #[inline]
    pub fn apply(&self, l: &[f64; 9], v: &[f64; 9]) -> [f64; 9] {
        let mut p = [0.0; 9];
        for &(i, j, k, c) in &self.entries {
            p[i as usize] += c * l[j as usize] * v[k as usize];
        }
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.entries.len() * 14);
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&(self.order as u32).to_le_bytes());
        for &(i, j, k, v) in &self.entries {
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&j.to_le_bytes());
            buf.extend_from_slice(&k.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 8 || &buf[..4] != TENSOR_MAGIC {
            return Err(Error::format(path, 0, "missing SHC1 magic"));
        }
        let order = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if order != 3 {
            return Err(Error::format(path, 4, format!("unsupported order {order}")));
        }
        let body = &buf[8..];
        if body.len() % 14 != 0 {
            let off = 8 + (body.len() / 14) * 14;
            return Err(Error::format(path, off as u64, "truncated tensor record"));
        }
        let n = (order * order) as u16;
        let mut entries = Vec::with_capacity(body.len() / 14);
        for (r, rec) in body.chunks_exact(14).enumerate() {
            let i = u16::from_le_bytes([rec[0], rec[1]]);
            let j = u16::from_le_bytes([rec[2], rec[3]]);
            let k = u16::from_le_bytes([rec[4], rec[5]]);
            if i >= n || j >= n || k >= n {
                return Err(Error::format(
                    path,
                    (8 + r * 14) as u64,
                    "tensor index out of range",
                ));
            }
            let v = f64::from_le_bytes(rec[6..14].try_into().unwrap());
            entries.push((i, j, k, v));
        }
        Ok(Self { order, entries })
    }

    /// Loads the cache at `path` when it exists and is valid, otherwise builds
    /// the tensor and writes the cache.
    pub fn load_or_build(path: &Path) -> Result<Self> {
        if path.exists() {
            if let Ok(t) = Self::load(path) {
                return Ok(t);
            }
        }
        let t = Self::build(3)?;
        t.save(path)?;
        Ok(t)
    }
}

/// Process-wide order-3 tensor.
pub fn triple_tensor() -> &'static TripleProductTensor {
    static T: OnceLock<TripleProductTensor> = OnceLock::new();
    T.get_or_init(|| TripleProductTensor::build(3).expect("order 3 is supported"))
}

/// Projects the product of two order-3 expansions back onto order 3.
pub fn sh_triple_product(
    l: &ShVector,
    v: &ShVector,
    c: &TripleProductTensor,
) -> Result<ShVector> {
    if l.order != 3 || v.order != 3 || c.order != 3 {
        return Err(Error::invalid(format!(
            "triple product needs order 3 operands, got {}, {} and tensor {}",
            l.order, v.order, c.order
        )));
    }
    let p = c.apply(&l.as_order3()?, &v.as_order3()?);
    Ok(ShVector {
        order: 3,
        coeffs: p.to_vec(),
    })
}

/// Order-3 coefficients of max(0, n . w) as a raw array, for unit `n`.
#[inline]
pub fn cosine_lobe(n: &Vec3) -> [f64; 9] {
    let b = basis9(n);
    let mut out = [0.0; 9];
    for i in 0..9 {
        out[i] = COSINE_LOBE_BANDS[sh_band(i)] * b[i];
    }
    out
}

/// Gradient of [`cosine_lobe`] coefficients with respect to the Cartesian
/// components of `n` (no unit-length projection applied).
pub fn cosine_lobe_grad(n: &Vec3) -> [[f64; 3]; 9] {
    let g = basis16_grad(n);
    let mut out = [[0.0; 3]; 9];
    for i in 0..9 {
        for a in 0..3 {
            out[i][a] = COSINE_LOBE_BANDS[sh_band(i)] * g[i][a];
        }
    }
    out
}

/// Order-3 SH of the clamped cosine lobe around `normal`, obtained by
/// rotating its zonal expansion.
pub fn cosine_lobe_sh(normal: &Vec3) -> Result<ShVector> {
    if !is_unit(normal, 1e-6) {
        return Err(Error::invalid(format!(
            "cosine lobe normal must be unit length, |n| = {}",
            normal.norm()
        )));
    }
    Ok(ShVector {
        order: 3,
        coeffs: cosine_lobe(normal).to_vec(),
    })
}

pub fn sh_dot(a: &ShVector, b: &ShVector) -> Result<f64> {
    if a.order != b.order {
        return Err(Error::invalid(format!(
            "SH dot product of order {} and order {}",
            a.order, b.order
        )));
    }
    Ok(a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let s = (1.0 - z * z).sqrt();
        Vec3::new(s * phi.cos(), s * phi.sin(), z)
    }

    /// Fibonacci-lattice quadrature, independent of the Gauss rule used to
    /// build the tensor.
    fn fibonacci(n: usize) -> Vec<Vec3> {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let s = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vec3::new(s * phi.cos(), s * phi.sin(), z)
            })
            .collect()
    }

    #[test]
    fn dc_value_and_parity() {
        let up = eval_sh_basis(&Vec3::z(), 3).unwrap();
        assert!((up[0] - 0.5 / PI.sqrt()).abs() < 1e-12);
        let down = eval_sh_basis(&-Vec3::z(), 3).unwrap();
        for i in 0..9 {
            let sign = if sh_band(i) % 2 == 1 { -1.0 } else { 1.0 };
            assert_eq!(down[i], sign * up[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(eval_sh_basis(&Vec3::new(0.0, 0.0, 2.0), 3).is_err());
        assert!(eval_sh_basis(&Vec3::z(), 5).is_err());
        assert!(cosine_lobe_sh(&Vec3::new(0.1, 0.0, 0.0)).is_err());
    }

    #[test]
    fn addition_theorem_by_sampling() {
        let pts = fibonacci(20000);
        let mut acc = 0.0;
        for d in &pts {
            acc += basis16(d).iter().map(|y| y * y).sum::<f64>();
        }
        let integral = acc * 4.0 * PI / pts.len() as f64;
        assert!((integral - 16.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn orthonormality_by_quadrature() {
        let pts = fibonacci(200_000);
        let w = 4.0 * PI / pts.len() as f64;
        let mut gram = [[0.0; 16]; 16];
        for d in &pts {
            let b = basis16(d);
            for i in 0..16 {
                for j in 0..16 {
                    gram[i][j] += w * b[i] * b[j];
                }
            }
        }
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] - expect).abs() < 1e-3, "({i},{j}) {}", gram[i][j]);
            }
        }
    }

    #[test]
    fn tensor_closed_form_entries_and_symmetry() {
        let t = triple_tensor();
        let y0 = 0.5 / PI.sqrt();
        assert!((t.get(0, 0, 0) - y0).abs() < 1e-12);
        for i in 0..9 {
            for j in 0..9 {
                let e = if i == j { y0 } else { 0.0 };
                assert!((t.get(i, j, 0) - e).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (i, j, k) = (rng.gen_range(0..9), rng.gen_range(0..9), rng.gen_range(0..9));
            let v = t.get(i, j, k);
            for (a, b, c) in [(i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                assert!((t.get(a, b, c) - v).abs() < 1e-12);
            }
        }
        for e in &t.entries {
            assert!(e.3.abs() >= 1e-12);
        }
    }

    #[test]
    fn tensor_matches_independent_quadrature() {
        let t = triple_tensor();
        let pts = fibonacci(1_000_000);
        let w = 4.0 * PI / pts.len() as f64;
        let mut dense = vec![0.0; 729];
        for d in &pts {
            let b = basis9(d);
            for i in 0..9 {
                for j in i..9 {
                    for k in j..9 {
                        dense[(i * 9 + j) * 9 + k] += w * b[i] * b[j] * b[k];
                    }
                }
            }
        }
        for i in 0..9 {
            for j in i..9 {
                for k in j..9 {
                    let q = dense[(i * 9 + j) * 9 + k];
                    assert!((q - t.get(i, j, k)).abs() < 1e-6, "C[{i}{j}{k}]");
                }
            }
        }
    }

    #[test]
    fn triple_product_identities() {
        let t = triple_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = ShVector::from_coeffs(3, l).unwrap();
        let mut unocc = ShVector::zeros(3);
        unocc.coeffs[0] = 2.0 * PI.sqrt();
        let p = sh_triple_product(&l, &unocc, t).unwrap();
        for i in 0..9 {
            assert!((p.coeffs[i] - l.coeffs[i]).abs() < 1e-9);
        }
        let zero = ShVector::zeros(3);
        let z = sh_triple_product(&zero, &unocc, t).unwrap();
        assert!(z.coeffs.iter().all(|c| *c == 0.0));
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = ShVector::from_coeffs(3, v).unwrap();
        let a = sh_triple_product(&l, &v, t).unwrap();
        let b = sh_triple_product(&v, &l, t).unwrap();
        for i in 0..9 {
            assert!((a.coeffs[i] - b.coeffs[i]).abs() < 1e-12);
        }
        assert!(sh_triple_product(&ShVector::zeros(4), &v, t).is_err());
    }

    #[test]
    fn cosine_lobe_integrates_to_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut one = ShVector::zeros(3);
        one.coeffs[0] = 2.0 * PI.sqrt();
        for _ in 0..20 {
            let n = random_dir(&mut rng);
            let rho = cosine_lobe_sh(&n).unwrap();
            assert!((sh_dot(&rho, &one).unwrap() - PI).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_lobe_rotation_equivariance() {
        // Compare cosine_lobe(R n) against the lobe around n re-projected
        // after rotating the sample directions.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes: Vec<Vec3> = (0..100).map(|_| random_dir(&mut rng)).collect();
        for _ in 0..20 {
            let axis = random_dir(&mut rng);
            let angle = rng.gen_range(0.0..PI);
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                angle,
            );
            let n = random_dir(&mut rng);
            let rn = rot * n;
            let lobe_n = ShVector::from_coeffs(3, cosine_lobe(&n).to_vec()).unwrap();
            let lobe_rn = ShVector::from_coeffs(3, cosine_lobe(&rn).to_vec()).unwrap();
            for w in &probes {
                let a = lobe_rn.eval(&(rot * w));
                let b = lobe_n.eval(w);
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sh_dot_parseval() {
        let f = |d: &Vec3| 0.3 + 0.5 * d.x - 0.2 * d.y * d.z;
        let g = |d: &Vec3| 1.0 - 0.4 * d.z + 0.1 * (d.x * d.x - d.y * d.y);
        let pts = fibonacci(100_000);
        let w = 4.0 * PI / pts.len() as f64;
        let mut a = vec![0.0; 9];
        let mut b = vec![0.0; 9];
        let mut direct = 0.0;
        for d in &pts {
            let y = basis9(d);
            for i in 0..9 {
                a[i] += w * f(d) * y[i];
                b[i] += w * g(d) * y[i];
            }
            direct += w * f(d) * g(d);
        }
        let a = ShVector::from_coeffs(3, a).unwrap();
        let b = ShVector::from_coeffs(3, b).unwrap();
        assert!((sh_dot(&a, &b).unwrap() - direct).abs() < 1e-3);
        assert_eq!(sh_dot(&ShVector::zeros(3), &b).unwrap(), 0.0);
        let mut e = ShVector::zeros(3);
        e.coeffs[4] = 1.0;
        assert_eq!(sh_dot(&e, &e).unwrap(), 1.0);
        assert!(sh_dot(&ShVector::zeros(4), &b).is_err());
    }

    #[test]
    fn tensor_cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.shc");
        let t = TripleProductTensor::load_or_build(&p).unwrap();
        let back = TripleProductTensor::load(&p).unwrap();
        assert_eq!(t, back);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            TripleProductTensor::load(&p),
            Err(Error::Format { .. })
        ));
        std::fs::write(&p, b"XXXX\x03\0\0\0").unwrap();
        assert!(TripleProductTensor::load(&p).is_err());
    }

    #[test]
    fn basis_gradient_matches_differences() {
        let d = Vec3::new(0.3, -0.4, 0.5);
        let g = basis16_grad(&d);
        for a in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[a] += 1e-6;
            dm[a] -= 1e-6;
            let (bp, bm) = (basis16(&dp), basis16(&dm));
            for i in 0..16 {
                let fd = (bp[i] - bm[i]) / 2e-6;
                assert!((fd - g[i][a]).abs() < 1e-7, "Y{i} d{a}");
            }
        }
    }
}
