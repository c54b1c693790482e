//! Cook-Torrance GGX terms and the split-sum environment BRDF table.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::math::{hammersley, Vec3};

/// Floor on the GGX width `a = r^2`.
pub const A_MIN: f64 = 1e-3;
/// Normal-incidence reflectance of dielectrics.
pub const F0_DIELECTRIC: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicrofacetParams {
    pub roughness: f64,
    pub metallic: f64,
    pub albedo: [f64; 3],
}

impl MicrofacetParams {
    pub fn new(roughness: f64, metallic: f64, albedo: [f64; 3]) -> Self {
        Self {
            roughness,
            metallic,
            albedo,
        }
    }

    /// GGX width, floored at [`A_MIN`].
    pub fn a(&self) -> f64 {
        (self.roughness * self.roughness).max(A_MIN)
    }

    pub fn k(&self) -> f64 {
        self.roughness.powi(4) * 0.5
    }

    pub fn f0(&self) -> [f64; 3] {
        let m = self.metallic;
        self.albedo.map(|c| m * c + (1.0 - m) * F0_DIELECTRIC)
    }
}

/// GGX normal distribution.
#[inline]
pub fn ggx_d(n_dot_h: f64, a: f64) -> f64 {
    let a = a.max(A_MIN);
    let a2 = a * a;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

#[inline]
fn ggx_d_da(n_dot_h: f64, a: f64) -> f64 {
    let a2 = a * a;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    2.0 * a / (PI * d * d) * (1.0 - 2.0 * a2 * n_dot_h * n_dot_h / d)
}

/// Schlick-GGX masking for one direction.
#[inline]
pub fn g_sub(n_dot_x: f64, k: f64) -> f64 {
    let den = n_dot_x * (1.0 - k) + k;
    if den <= 0.0 {
        0.0
    } else {
        n_dot_x / den
    }
}

#[inline]
fn g_sub_dk(x: f64, k: f64) -> f64 {
    let den = x * (1.0 - k) + k;
    if den <= 0.0 {
        0.0
    } else {
        -x * (1.0 - x) / (den * den)
    }
}

/// Smith shadowing-masking: product of the two one-sided terms.
#[inline]
pub fn smith_g(n_dot_v: f64, n_dot_l: f64, k: f64) -> f64 {
    g_sub(n_dot_v, k) * g_sub(n_dot_l, k)
}

#[inline]
pub fn fresnel_schlick(h_dot_v: f64, f0: [f64; 3]) -> [f64; 3] {
    let w = (1.0 - h_dot_v).clamp(0.0, 1.0).powi(5);
    f0.map(|f| f + (1.0 - f) * w)
}

/// GGX half vector in the local frame (z = normal) for a point on the unit
/// square.
#[inline]
pub fn sample_ggx_half(xi: (f64, f64), a: f64) -> Vec3 {
    let a2 = a * a;
    let phi = 2.0 * PI * xi.0;
    let cos2 = ((1.0 - xi.1) / (1.0 + (a2 - 1.0) * xi.1)).clamp(0.0, 1.0);
    let cos_t = cos2.sqrt();
    let sin_t = (1.0 - cos2).sqrt();
    Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

/// Full microfacet BRDF (without the cosine factor).
pub fn eval_microfacet_brdf(wi: &Vec3, wo: &Vec3, n: &Vec3, p: &MicrofacetParams) -> [f64; 3] {
    eval_microfacet_brdf_grad(wi, wo, n, p).value
}

/// BRDF value and its partials w.r.t. roughness, metallic and albedo.
#[derive(Debug, Clone, Copy)]
pub struct BrdfEval {
    pub value: [f64; 3],
    pub d_rough: [f64; 3],
    pub d_metal: [f64; 3],
    /// Diagonal: channel c only depends on albedo c.
    pub d_albedo: [f64; 3],
}

pub fn eval_microfacet_brdf_grad(
    wi: &Vec3,
    wo: &Vec3,
    n: &Vec3,
    p: &MicrofacetParams,
) -> BrdfEval {
    let zero = BrdfEval {
        value: [0.0; 3],
        d_rough: [0.0; 3],
        d_metal: [0.0; 3],
        d_albedo: [0.0; 3],
    };
    let nl = n.dot(wi);
    let nv = n.dot(wo);
    if nl <= 0.0 || nv <= 0.0 {
        return zero;
    }
    let h = (wi + wo).normalize();
    let nh = n.dot(&h).max(0.0);
    let hv = h.dot(wo).clamp(0.0, 1.0);
    let r = p.roughness;
    let a = p.a();
    let da_dr = if r * r > A_MIN { 2.0 * r } else { 0.0 };
    let k = p.k();
    let dk_dr = 2.0 * r.powi(3);

    let d = ggx_d(nh, a);
    let dd_dr = ggx_d_da(nh, a) * da_dr;
    let gv = g_sub(nv, k);
    let gl = g_sub(nl, k);
    let g = gv * gl;
    let dg_dr = (g_sub_dk(nv, k) * gl + gv * g_sub_dk(nl, k)) * dk_dr;
    let w = (1.0 - hv).powi(5);
    let f0 = p.f0();
    let inv = 1.0 / (4.0 * nl * nv);

    let mut out = zero;
    for c in 0..3 {
        let f = f0[c] + (1.0 - f0[c]) * w;
        out.value[c] = d * g * f * inv;
        out.d_rough[c] = (dd_dr * g + d * dg_dr) * f * inv;
        let df_df0 = 1.0 - w;
        out.d_metal[c] = d * g * inv * df_df0 * (p.albedo[c] - F0_DIELECTRIC);
        out.d_albedo[c] = d * g * inv * df_df0 * p.metallic;
    }
    out
}

/// Split-sum scale and bias for one (n.v, r), by GGX importance sampling.
pub fn integrate_env_brdf(n_dot_v: f64, r: f64, samples: usize) -> (f64, f64) {
    let nv = n_dot_v.clamp(1e-4, 1.0);
    let v = Vec3::new((1.0 - nv * nv).sqrt(), 0.0, nv);
    let a = (r * r).max(A_MIN);
    let k = r.powi(4) * 0.5;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..samples {
        let h = sample_ggx_half(hammersley(i as u32, samples as u32), a);
        let vh = v.dot(&h);
        let l = h * (2.0 * vh) - v;
        let nl = l.z;
        if nl <= 0.0 || vh <= 0.0 {
            continue;
        }
        let g = smith_g(nv, nl, k);
        let g_vis = g * vh / (h.z * nv);
        let fc = (1.0 - vh).powi(5);
        sa += (1.0 - fc) * g_vis;
        sb += fc * g_vis;
    }
    let (s, b) = (sa / samples as f64, sb / samples as f64);
    // The r^4/2 masking term under-shadows at grazing angles; rescale so the
    // directional albedo never exceeds one.
    let total = s + b;
    if total > 1.0 {
        (s / total, b / total)
    } else {
        (s, b)
    }
}

/// Environment BRDF table. Entry (i, j) sits at the texel center
/// `n.v = (i + 0.5)/N`, `r = (j + 0.5)/N` and holds (scale, bias).
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfLut {
    pub n: usize,
    pub data: Vec<[f32; 2]>,
}

/// Table lookup with partials.
#[derive(Debug, Clone, Copy)]
pub struct LutSample {
    pub scale: f64,
    pub bias: f64,
    pub d_scale_dnv: f64,
    pub d_scale_dr: f64,
    pub d_bias_dnv: f64,
    pub d_bias_dr: f64,
}

pub fn build_brdf_lut(n: usize, samples: usize) -> Result<BrdfLut> {
    if n < 2 || samples == 0 {
        return Err(Error::invalid(format!(
            "BRDF table needs N >= 2 and samples > 0, got N={n}, samples={samples}"
        )));
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let nv = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let r = (j as f64 + 0.5) / n as f64;
            let (s, b) = integrate_env_brdf(nv, r, samples);
            data.push([s as f32, b as f32]);
        }
    }
    Ok(BrdfLut { n, data })
}

impl BrdfLut {
    pub fn lookup(&self, n_dot_v: f64, r: f64) -> (f64, f64) {
        let s = self.sample(n_dot_v, r);
        (s.scale, s.bias)
    }

    pub fn sample(&self, n_dot_v: f64, r: f64) -> LutSample {
        let n = self.n;
        let nf = n as f64;
        let axis = |x: f64| {
            let s = x * nf - 0.5;
            let clamped = s.clamp(0.0, nf - 1.0);
            let live = s == clamped;
            let i0 = (clamped.floor() as usize).min(n - 2);
            (i0, clamped - i0 as f64, if live { nf } else { 0.0 })
        };
        let (i0, fx, dsx) = axis(n_dot_v);
        let (j0, fy, dsy) = axis(r);
        let e = |i: usize, j: usize| {
            let v = self.data[i * n + j];
            (v[0] as f64, v[1] as f64)
        };
        let (s00, b00) = e(i0, j0);
        let (s01, b01) = e(i0, j0 + 1);
        let (s10, b10) = e(i0 + 1, j0);
        let (s11, b11) = e(i0 + 1, j0 + 1);
        let bl = |v00: f64, v01: f64, v10: f64, v11: f64| {
            let val = (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11);
            let dx = ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01)) * dsx;
            let dy = ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10)) * dsy;
            (val, dx, dy)
        };
        let (scale, d_scale_dnv, d_scale_dr) = bl(s00, s01, s10, s11);
        let (bias, d_bias_dnv, d_bias_dr) = bl(b00, b01, b10, b11);
        LutSample {
            scale,
            bias,
            d_scale_dnv,
            d_scale_dr,
            d_bias_dnv,
            d_bias_dr,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.data.len() * 8);
        buf.extend_from_slice(b"BLUT");
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        for e in &self.data {
            buf.extend_from_slice(&e[0].to_le_bytes());
            buf.extend_from_slice(&e[1].to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 8 || &buf[0..4] != b"BLUT" {
            return Err(Error::format(path, 0, "missing BLUT magic"));
        }
        let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if n < 2 {
            return Err(Error::format(path, 4, format!("bad table size {n}")));
        }
        let want = 8 + n * n * 8;
        if buf.len() != want {
            return Err(Error::format(
                path,
                buf.len().min(want) as u64,
                format!("expected {want} bytes, found {}", buf.len()),
            ));
        }
        let data = buf[8..]
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                ]
            })
            .collect();
        Ok(Self { n, data })
    }
}

/// Shared 64x64 table with 1024 samples per entry.
pub fn default_lut() -> &'static BrdfLut {
    static LUT: OnceLock<BrdfLut> = OnceLock::new();
    LUT.get_or_init(|| build_brdf_lut(64, 1024).expect("valid table parameters"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gauss_legendre;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Tensor-product quadrature over the hemisphere around +z:
    /// Gauss-Legendre in cos(theta), midpoint in phi.
    fn hemisphere(n_mu: usize, n_phi: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
        let (x, w) = gauss_legendre(n_mu);
        let mut acc = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            let mu = 0.5 * (xi + 1.0);
            let s = (1.0 - mu * mu).max(0.0).sqrt();
            for k in 0..n_phi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                let d = Vec3::new(s * phi.cos(), s * phi.sin(), mu);
                acc += 0.5 * wi * (2.0 * PI / n_phi as f64) * f(d);
            }
        }
        acc
    }

    #[test]
    fn ndf_examples() {
        assert!((ggx_d(1.0, 0.5) - 1.0 / (PI * 0.25)).abs() < 1e-12);
        assert!((ggx_d(0.0, 1.0) - 1.0 / PI).abs() < 1e-12);
        assert!(ggx_d(1.0, 0.0).is_finite());
    }

    #[test]
    fn ndf_is_normalized() {
        for a in [0.2, 0.5, 1.0] {
            let v = hemisphere(400, 64, |h| ggx_d(h.z, a) * h.z);
            assert!((v - 1.0).abs() < 0.02, "a={a}: {v}");
        }
    }

    #[test]
    fn smith_examples() {
        assert_eq!(smith_g(0.3, 0.8, 0.0), 1.0);
        assert!((smith_g(1.0, 1.0, 0.25) - 1.0).abs() < 1e-15);
        let g = smith_g(0.5, 0.5, 0.125);
        assert!((g - (0.5f64 / 0.5625).powi(2)).abs() < 1e-12);
        assert!((g - 0.7901).abs() < 1e-4);
        assert_eq!(smith_g(0.0, 0.5, 0.0), 0.0);
    }

    #[test]
    fn fresnel_examples() {
        let f0 = [0.2, 0.5, 0.9];
        assert_eq!(fresnel_schlick(1.0, f0), f0);
        assert_eq!(fresnel_schlick(0.0, f0), [1.0; 3]);
        let f = fresnel_schlick(0.5, [0.04; 3]);
        assert!((f[0] - 0.07).abs() < 1e-12);
    }

    #[test]
    fn lut_mirror_limit_and_bounds() {
        let lut = default_lut();
        let (s, b) = lut.lookup(1.0, 0.0);
        assert!((s - 1.0).abs() < 0.02 && b.abs() < 0.02, "{s} {b}");
        for e in &lut.data {
            assert!(e[0] >= 0.0 && e[1] >= 0.0);
            assert!(e[0] + e[1] <= 1.001);
        }
    }

    /// Hemisphere quadrature of the specular lobe with F0 = 1 and F0 = 0.
    fn env_brdf_oracle(nv: f64, r: f64) -> (f64, f64) {
        let n = Vec3::z();
        let wo = Vec3::new((1.0 - nv * nv).sqrt(), 0.0, nv);
        let white = MicrofacetParams::new(r, 1.0, [1.0; 3]);
        let black = MicrofacetParams::new(r, 1.0, [0.0; 3]);
        let one = hemisphere(400, 400, |wi| eval_microfacet_brdf(&wi, &wo, &n, &white)[0] * wi.z);
        let bias = hemisphere(400, 400, |wi| eval_microfacet_brdf(&wi, &wo, &n, &black)[0] * wi.z);
        (one - bias, bias)
    }

    #[test]
    fn lut_matches_quadrature_oracle() {
        let lut = default_lut();
        let (s, b) = lut.lookup(0.5, 0.5);
        let (os, ob) = env_brdf_oracle(0.5, 0.5);
        let tol = 0.01 * (os + ob);
        assert!((s - os).abs() <= tol, "scale {s} vs {os}");
        assert!((b - ob).abs() <= tol, "bias {b} vs {ob}");
    }

    #[test]
    fn lut_round_trip_and_corruption() {
        let lut = build_brdf_lut(8, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.blut");
        lut.save(&p).unwrap();
        assert_eq!(BrdfLut::load(&p).unwrap(), lut);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(BrdfLut::load(&p).is_err());
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(BrdfLut::load(&p).is_err());
    }

    #[test]
    fn lut_partials_match_differences() {
        let lut = default_lut();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let nv = rng.gen_range(0.05..0.95);
            let r = rng.gen_range(0.05..0.95);
            let s = lut.sample(nv, r);
            let h = 1e-6;
            let fd = |f: &dyn Fn(f64, f64) -> f64| {
                (
                    (f(nv + h, r) - f(nv - h, r)) / (2.0 * h),
                    (f(nv, r + h) - f(nv, r - h)) / (2.0 * h),
                )
            };
            let (a, b) = fd(&|x, y| lut.lookup(x, y).0);
            assert!((a - s.d_scale_dnv).abs() < 1e-3 * (1.0 + a.abs()));
            assert!((b - s.d_scale_dr).abs() < 1e-3 * (1.0 + b.abs()));
            let (a, b) = fd(&|x, y| lut.lookup(x, y).1);
            assert!((a - s.d_bias_dnv).abs() < 1e-3 * (1.0 + a.abs()));
            assert!((b - s.d_bias_dr).abs() < 1e-3 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn split_sum_constant_env_bound() {
        let lut = default_lut();
        for i in 0..=20 {
            for j in 0..=20 {
                let (s, b) = lut.lookup(i as f64 / 20.0, j as f64 / 20.0);
                assert!(s + b <= 1.001);
            }
        }
    }

    #[test]
    fn furnace_bound() {
        let n = Vec3::z();
        for r in [0.2, 0.5, 0.9] {
            for nv in [0.2, 0.6, 1.0] {
                let wo = Vec3::new((1.0 - nv * nv as f64).sqrt(), 0.0, nv);
                let p = MicrofacetParams::new(r, 1.0, [1.0; 3]);
                let e = hemisphere(300, 300, |wi| eval_microfacet_brdf(&wi, &wo, &n, &p)[0] * wi.z);
                assert!(e <= 1.05, "r={r} nv={nv}: {e}");
            }
        }
    }

    #[test]
    fn brdf_partials_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = Vec3::z();
        let mut checked = 0;
        while checked < 50 {
            let wi = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0)).normalize();
            let wo = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0)).normalize();
            let p = MicrofacetParams::new(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            );
            let g = eval_microfacet_brdf_grad(&wi, &wo, &n, &p);
            let h = 1e-4;
            let check = |an: f64, plus: MicrofacetParams, minus: MicrofacetParams, c: usize| {
                let fd = (eval_microfacet_brdf(&wi, &wo, &n, &plus)[c]
                    - eval_microfacet_brdf(&wi, &wo, &n, &minus)[c])
                    / (2.0 * h);
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-9, "{fd} vs {an}");
            };
            for c in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp.roughness += h;
                pm.roughness -= h;
                check(g.d_rough[c], pp, pm, c);
                let (mut pp, mut pm) = (p, p);
                pp.metallic += h;
                pm.metallic -= h;
                check(g.d_metal[c], pp, pm, c);
                let (mut pp, mut pm) = (p, p);
                pp.albedo[c] += h;
                pm.albedo[c] -= h;
                check(g.d_albedo[c], pp, pm, c);
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn params_invariants(r in 0.0f64..=1.0, m in 0.0f64..=1.0, c in prop::array::uniform3(0.0f64..=1.0)) {
            let p = MicrofacetParams::new(r, m, c);
            prop_assert!(p.a() > 0.0 && p.a() <= 1.0);
            prop_assert!(p.k() >= 0.0 && p.k() <= 0.5);
            for f in p.f0() {
                prop_assert!(f >= 0.04 * (1.0 - m) - 1e-12 && f <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn below_horizon_is_black(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..-0.01) {
            let wi = Vec3::new(x, y, z).normalize();
            let wo = Vec3::new(0.2, 0.1, 0.9).normalize();
            let p = MicrofacetParams::new(0.4, 0.5, [0.5; 3]);
            prop_assert_eq!(eval_microfacet_brdf(&wi, &wo, &Vec3::z(), &p), [0.0; 3]);
        }

        #[test]
        fn reciprocity(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0), r in 0.05f64..1.0) {
            let wi = Vec3::new(a[0], a[1], a[2].abs() + 0.05).normalize();
            let wo = Vec3::new(b[0], b[1], b[2].abs() + 0.05).normalize();
            let p = MicrofacetParams::new(r, 0.3, [0.8, 0.4, 0.1]);
            let f = eval_microfacet_brdf(&wi, &wo, &Vec3::z(), &p);
            let g = eval_microfacet_brdf(&wo, &wi, &Vec3::z(), &p);
            for c in 0..3 {
                prop_assert!((f[c] - g[c]).abs() <= 1e-9 * f[c].abs().max(1.0));
            }
        }
    }
}
