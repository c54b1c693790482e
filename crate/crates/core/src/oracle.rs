//! Synthetic ground truth: hand-authored sphere and plane scenes with known
//! materials, ray traced under analytic environment lights and shaded with
//! the same diffuse and split-sum terms the learned model uses.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::brdf::default_lut;
use crate::dataset::{write_points, Colorspace, Dataset, ViewEntry};
use crate::envlight::{texel_table, CubeMap};
use crate::error::{Error, Result};
use crate::io::{save_cubemap_pfm, write_pfm, write_png, Image};
use crate::math::Vec3;
use crate::sh::{cosine_lobe, triple_tensor};
use crate::shading::{display_map, shade_physical, shade_specular};
use crate::splat::Camera;
use crate::train::engine::LightContext;
use crate::train::TrainView;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    LambertianSphere,
    MirrorSphere,
    TwoMaterial,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::LambertianSphere, Preset::MirrorSphere, Preset::TwoMaterial];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LambertianSphere => "lambertian-sphere",
            Preset::MirrorSphere => "mirror-sphere",
            Preset::TwoMaterial => "two-material",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown oracle preset '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub material: Material,
}

/// Horizontal square `|x|, |z| <= half` at height `y`, facing +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ground {
    pub y: f64,
    pub half: f64,
    pub material: Material,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    x: Vec3,
    n: Vec3,
    material: Material,
}

impl Sphere {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let oc = o - self.center;
        let b = oc.dot(d);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        [-b - s, -b + s].into_iter().find(|t| *t > 1e-6)
    }
}

impl Ground {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        if d.y.abs() < 1e-12 {
            return None;
        }
        let t = (self.y - o.y) / d.y;
        if t <= 1e-6 {
            return None;
        }
        let p = o + d * t;
        (p.x.abs() <= self.half && p.z.abs() <= self.half).then_some(t)
    }
}

/// Three colored vMF-shaped lobes over a dim ambient term.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobEnv {
    pub ambient: [f64; 3],
    /// (direction, sharpness, color)
    pub blobs: Vec<(Vec3, f64, [f64; 3])>,
}

impl BlobEnv {
    /// Light used to render the training views.
    pub fn training() -> Self {
        Self {
            ambient: [0.12, 0.13, 0.15],
            blobs: vec![
                (Vec3::new(0.5, 0.75, 0.45).normalize(), 30.0, [5.0, 4.2, 3.2]),
                (Vec3::new(-0.85, 0.3, -0.25).normalize(), 12.0, [0.9, 1.4, 2.4]),
                (Vec3::new(0.15, -0.4, -0.9).normalize(), 6.0, [0.6, 1.1, 0.5]),
            ],
        }
    }

    /// A different light for relighting checks.
    pub fn heldout() -> Self {
        Self {
            ambient: [0.1, 0.08, 0.08],
            blobs: vec![
                (Vec3::new(-0.4, 0.8, -0.45).normalize(), 20.0, [2.5, 4.0, 5.0]),
                (Vec3::new(0.9, 0.1, 0.3).normalize(), 25.0, [4.0, 1.5, 0.8]),
                (Vec3::new(0.0, -0.3, 0.95).normalize(), 8.0, [1.0, 0.9, 1.3]),
            ],
        }
    }

    pub fn radiance(&self, d: &Vec3) -> [f64; 3] {
        let mut out = self.ambient;
        for (mu, k, col) in &self.blobs {
            let w = (k * (mu.dot(d) - 1.0)).exp();
            for c in 0..3 {
                out[c] += w * col[c];
            }
        }
        out
    }

    pub fn cubemap(&self, res: usize) -> CubeMap {
        CubeMap::from_fn(res, 3, |d| self.radiance(d).to_vec())
    }
}

/// A ground-truth scene.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScene {
    pub preset: Preset,
    pub sphere: Sphere,
    pub ground: Option<Ground>,
}

impl OracleScene {
    pub fn new(preset: Preset) -> Self {
        let sphere = |material| Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
            material,
        };
        match preset {
            Preset::LambertianSphere => Self {
                preset,
                sphere: sphere(Material {
                    albedo: [0.75, 0.45, 0.25],
                    roughness: 0.99,
                    metallic: 0.0,
                }),
                ground: None,
            },
            Preset::MirrorSphere => Self {
                preset,
                sphere: sphere(Material {
                    albedo: [0.95, 0.93, 0.9],
                    roughness: 0.05,
                    metallic: 1.0,
                }),
                ground: None,
            },
            Preset::TwoMaterial => Self {
                preset,
                sphere: Sphere {
                    center: Vec3::new(0.0, 0.0, 0.0),
                    radius: 0.8,
                    material: Material {
                        albedo: [0.95, 0.8, 0.55],
                        roughness: 0.1,
                        metallic: 1.0,
                    },
                },
                ground: Some(Ground {
                    y: -0.8,
                    half: 1.6,
                    material: Material {
                        albedo: [0.45, 0.55, 0.65],
                        roughness: 0.8,
                        metallic: 0.0,
                    },
                }),
            },
        }
    }

    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if let Some(t) = self.sphere.intersect(o, d) {
            let x = o + d * t;
            best = Some(Hit {
                t,
                x,
                n: (x - self.sphere.center).normalize(),
                material: self.sphere.material,
            });
        }
        if let Some(g) = &self.ground {
            if let Some(t) = g.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        x: o + d * t,
                        n: Vec3::y(),
                        material: g.material,
                    });
                }
            }
        }
        best
    }

    /// Order-3 SH of the visibility at surface point `x` with normal `n`:
    /// directions below the surface or blocked by other geometry are 0.
    fn visibility(&self, x: &Vec3, n: &Vec3) -> [f64; 9] {
        let table = texel_table(VIS_RES);
        let o = x + n * 1e-6;
        let mut v = [0.0; 9];
        for t in 0..table.len() {
            let d = &table.dirs[t];
            if d.dot(n) <= 0.0 || self.intersect(&o, d).is_some() {
                continue;
            }
            for i in 0..9 {
                v[i] += table.basis[t][i] * table.solid_angle[t];
            }
        }
        v
    }

    /// Linear physical radiance leaving `hit` toward `wo`.
    fn shade(&self, hit: &Hit, wo: &Vec3, light: &LightContext) -> [f64; 3] {
        let m = &hit.material;
        let spec = shade_specular(m.albedo, m.roughness, m.metallic, &hit.n, wo, &light.env, default_lut());
        let diff = if m.metallic < 1.0 {
            let v = self.visibility(&hit.x, &hit.n);
            let rho = cosine_lobe(&hit.n);
            let tensor = triple_tensor();
            let mut e = [0.0; 3];
            for c in 0..3 {
                let p = tensor.apply(&light.sh[c], &v);
                e[c] = (0..9).map(|i| rho[i] * p[i]).sum::<f64>();
            }
            [0, 1, 2].map(|c| m.albedo[c] / PI * e[c])
        } else {
            [0.0; 3]
        };
        shade_physical(diff, spec, m.metallic)
    }

    /// Display-space render with `ss x ss` supersampling. The mask marks
    /// pixels whose center ray hits the object; normals come from that ray.
    pub fn render(&self, cam: &Camera, light: &LightContext, background: [f64; 3], ss: usize) -> OracleFrame {
        let (w, h) = (cam.width, cam.height);
        let eye = cam.position();
        let ss = ss.max(1);
        let rows: Vec<(Vec<f32>, Vec<f32>, Vec<Option<Vec3>>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rgb = Vec::with_capacity(3 * w);
                let mut mask = Vec::with_capacity(w);
                let mut normals = Vec::with_capacity(w);
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                            let d = cam.ray_dir(px, py);
                            let c = match self.intersect(&eye, &d) {
                                Some(hit) => self.shade(&hit, &-d, light).map(display_map),
                                None => background,
                            };
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    let inv = 1.0 / (ss * ss) as f64;
                    rgb.extend(acc.map(|v| (v * inv) as f32));
                    let center = self.intersect(&eye, &cam.pixel_ray(x, y));
                    mask.push(if center.is_some() { 1.0 } else { 0.0 });
                    normals.push(center.map(|c| c.n));
                }
                (rgb, mask, normals)
            })
            .collect();
        let mut image = Image::new(w, h, 3);
        let mut mask = Image::new(w, h, 1);
        let mut normals = Vec::with_capacity(w * h);
        for (y, (r, m, n)) in rows.into_iter().enumerate() {
            image.data[y * 3 * w..(y + 1) * 3 * w].copy_from_slice(&r);
            mask.data[y * w..(y + 1) * w].copy_from_slice(&m);
            normals.extend(n);
        }
        OracleFrame { image, mask, normals }
    }

    /// Noisy surface samples: a Fibonacci lattice on the sphere and a
    /// jittered grid on the ground.
    pub fn sample_points(&self, count: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.003).unwrap();
        let n_ground = if self.ground.is_some() { count * 2 / 5 } else { 0 };
        let n_sphere = count - n_ground;
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut pts = Vec::with_capacity(count);
        for i in 0..n_sphere {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n_sphere as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            let d = Vec3::new(r * phi.cos(), y, r * phi.sin());
            pts.push(self.sphere.center + d * self.sphere.radius);
        }
        if let Some(g) = &self.ground {
            let side = (n_ground as f64).sqrt().ceil() as usize;
            let step = 2.0 * g.half / side as f64;
            'outer: for j in 0..side {
                for i in 0..side {
                    if pts.len() == count {
                        break 'outer;
                    }
                    let x = -g.half + (i as f64 + 0.5) * step;
                    let z = -g.half + (j as f64 + 0.5) * step;
                    pts.push(Vec3::new(x, g.y, z));
                }
            }
        }
        for p in pts.iter_mut() {
            for a in 0..3 {
                p[a] += noise.sample(&mut rng);
            }
        }
        pts
    }

    /// Domain sphere enclosing the whole object.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        match &self.ground {
            None => (self.sphere.center, self.sphere.radius * 1.2),
            Some(g) => (Vec3::new(0.0, g.y, 0.0), g.half * 2f64.sqrt() * 1.1),
        }
    }
}

/// Cube face resolution of the ground-truth visibility quadrature.
const VIS_RES: usize = 12;

#[derive(Debug, Clone)]
pub struct OracleFrame {
    pub image: Image,
    /// One channel, 1 on object pixels.
    pub mask: Image,
    pub normals: Vec<Option<Vec3>>,
}

impl OracleFrame {
    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.data.iter().map(|v| *v > 0.5).collect()
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub size: usize,
    pub views: usize,
    pub test_views: usize,
    pub points: usize,
    pub env_res: usize,
    pub env_levels: usize,
    pub prefilter_samples: usize,
    pub supersample: usize,
    pub fov_deg: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            size: 64,
            views: 16,
            test_views: 4,
            points: 500,
            env_res: 32,
            env_levels: 6,
            prefilter_samples: 256,
            supersample: 3,
            fov_deg: 40.0,
            background: [1.0; 3],
            seed: 7,
        }
    }
}

/// Cameras on the upper hemisphere around the object, golden-angle spaced.
/// Test cameras interleave with the training ones.
pub fn oracle_cameras(scene: &OracleScene, cfg: &OracleConfig, test: bool) -> Result<Vec<Camera>> {
    let (target, dist) = match scene.ground {
        None => (scene.sphere.center, 4.0),
        Some(g) => (Vec3::new(0.0, g.y * 0.5, 0.0), 5.5),
    };
    let n = if test { cfg.test_views } else { cfg.views };
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let u = (i as f64 + if test { 0.25 } else { 0.5 }) / n.max(1) as f64;
            let elev = (8.0 + 52.0 * u).to_radians();
            let az = golden * i as f64 + if test { 1.1 } else { 0.0 };
            let eye = target + Vec3::new(elev.cos() * az.cos(), elev.sin(), elev.cos() * az.sin()) * dist;
            Camera::look_at(eye, target, Vec3::y(), cfg.fov_deg, cfg.size, cfg.size)
        })
        .collect()
}

/// A rendered view with its ground truth.
#[derive(Debug, Clone)]
pub struct OracleView {
    pub camera: Camera,
    pub frame: OracleFrame,
}

impl OracleView {
    pub fn train_view(&self, with_mask: bool) -> TrainView {
        TrainView {
            camera: self.camera.clone(),
            image: self.frame.image.clone(),
            mask: with_mask.then(|| self.frame.mask.clone()),
        }
    }
}

/// Everything `make-oracle` produces.
#[derive(Debug, Clone)]
pub struct OracleDataset {
    pub scene: OracleScene,
    pub config: OracleConfig,
    pub env: CubeMap,
    pub heldout_env: CubeMap,
    pub train: Vec<OracleView>,
    pub test: Vec<OracleView>,
    pub points: Vec<Vec3>,
}

impl OracleDataset {
    pub fn light(&self, env: &CubeMap) -> Result<LightContext> {
        LightContext::from_radiance(env.clone(), self.config.env_levels, self.config.prefilter_samples)
    }

    /// Ground-truth renders of `cams` under `env`.
    pub fn render_under(&self, env: &CubeMap, cams: &[Camera]) -> Result<Vec<OracleFrame>> {
        let light = self.light(env)?;
        Ok(cams
            .iter()
            .map(|c| self.scene.render(c, &light, self.config.background, self.config.supersample))
            .collect())
    }

    pub fn train_views(&self, with_mask: bool) -> Vec<TrainView> {
        self.train.iter().map(|v| v.train_view(with_mask)).collect()
    }

    pub fn test_views(&self, with_mask: bool) -> Vec<TrainView> {
        self.test.iter().map(|v| v.train_view(with_mask)).collect()
    }
}

pub fn make_oracle(preset: Preset, cfg: &OracleConfig) -> Result<OracleDataset> {
    if cfg.views < 2 {
        return Err(Error::invalid("an oracle dataset needs at least 2 views"));
    }
    let scene = OracleScene::new(preset);
    let env = BlobEnv::training().cubemap(cfg.env_res);
    let heldout_env = BlobEnv::heldout().cubemap(cfg.env_res);
    let light = LightContext::from_radiance(env.clone(), cfg.env_levels, cfg.prefilter_samples)?;
    let render = |cams: Vec<Camera>| -> Vec<OracleView> {
        cams.into_iter()
            .map(|camera| OracleView {
                frame: scene.render(&camera, &light, cfg.background, cfg.supersample),
                camera,
            })
            .collect()
    };
    let train = render(oracle_cameras(&scene, cfg, false)?);
    let test = render(oracle_cameras(&scene, cfg, true)?);
    let points = scene.sample_points(cfg.points, cfg.seed);
    Ok(OracleDataset {
        scene,
        config: cfg.clone(),
        env,
        heldout_env,
        train,
        test,
        points,
    })
}

fn normals_image(normals: &[Option<Vec3>], w: usize, h: usize) -> Image {
    let mut im = Image::new(w, h, 3);
    for (i, n) in normals.iter().enumerate() {
        if let Some(n) = n {
            for a in 0..3 {
                im.data[3 * i + a] = n[a] as f32;
            }
        }
    }
    im
}

fn write_views(dir: &Path, prefix: &str, views: &[OracleView], cfg: &OracleConfig) -> Result<Dataset> {
    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let name = format!("{prefix}_{i:03}");
        let image = PathBuf::from(format!("images/{name}.png"));
        let mask = PathBuf::from(format!("masks/{name}.png"));
        let normal = PathBuf::from(format!("normals/{name}.pfm"));
        write_png(&dir.join(&image), &v.frame.image)?;
        write_png(&dir.join(&mask), &v.frame.mask)?;
        write_pfm(&dir.join(&normal), &normals_image(&v.frame.normals, cfg.size, cfg.size))?;
        entries.push(ViewEntry {
            name,
            image,
            camera: v.camera.clone(),
            mask: Some(mask),
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        views: entries,
        colorspace: Colorspace::Srgb,
        background: cfg.background,
        env: Some(PathBuf::from("env")),
        points: Some(PathBuf::from("points.txt")),
    })
}

/// Writes the dataset: `train.txt` and `test.txt` manifests, images, masks,
/// normals, the true and held-out environments, the point cloud and a
/// material sidecar.
pub fn write_oracle(dir: &Path, ds: &OracleDataset) -> Result<()> {
    for sub in ["images", "masks", "normals"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let train = write_views(dir, "train", &ds.train, &ds.config)?;
    train.write_manifest(&dir.join("train.txt"))?;
    let test = write_views(dir, "test", &ds.test, &ds.config)?;
    test.write_manifest(&dir.join("test.txt"))?;
    save_cubemap_pfm(&dir.join("env"), &ds.env)?;
    save_cubemap_pfm(&dir.join("env_heldout"), &ds.heldout_env)?;
    write_points(&dir.join("points.txt"), &ds.points)?;
    let mut s = format!("preset = {}\n", ds.scene.preset);
    let mut mat = |name: &str, m: &Material| {
        s.push_str(&format!(
            "{name}.albedo = {} {} {}\n{name}.roughness = {}\n{name}.metallic = {}\n",
            m.albedo[0], m.albedo[1], m.albedo[2], m.roughness, m.metallic
        ));
    };
    mat("sphere", &ds.scene.sphere.material);
    if let Some(g) = &ds.scene.ground {
        mat("ground", &g.material);
    }
    let (c, r) = ds.scene.bounding_sphere();
    s.push_str(&format!("domain_sphere = {},{},{},{}\n", c.x, c.y, c.z, r));
    let p = dir.join("material.txt");
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> OracleConfig {
        OracleConfig {
            size: 24,
            views: 3,
            test_views: 1,
            points: 60,
            env_res: 16,
            env_levels: 4,
            prefilter_samples: 32,
            supersample: 1,
            ..OracleConfig::default()
        }
    }

    #[test]
    fn presets_round_trip_by_name() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("cube".parse::<Preset>().is_err());
    }

    #[test]
    fn mask_covers_the_sphere_silhouette() {
        let ds = make_oracle(Preset::LambertianSphere, &small()).unwrap();
        let f = &ds.train[0].frame;
        let frac = f.mask.data.iter().filter(|v| **v > 0.5).count() as f64 / f.mask.data.len() as f64;
        // Angular radius asin(1/4) against a 40 degree field of view.
        let r_px = (1.0f64 / 4.0).asin().tan() / 20f64.to_radians().tan() * 12.0;
        let expect = PI * r_px * r_px / (24.0 * 24.0);
        assert!((frac - expect).abs() < 0.05, "{frac} vs {expect}");
        for (n, m) in f.normals.iter().zip(&f.mask.data) {
            assert_eq!(n.is_some(), *m > 0.5);
        }
    }

    #[test]
    fn background_pixels_are_the_background() {
        let ds = make_oracle(Preset::MirrorSphere, &small()).unwrap();
        let f = &ds.train[1].frame;
        assert_eq!(f.image.pixel(0, 0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn visibility_of_an_open_point_is_a_hemisphere() {
        let s = OracleScene::new(Preset::LambertianSphere);
        let n = Vec3::new(0.0, 1.0, 0.0);
        let v = s.visibility(&n, &n);
        // Projection of the upper hemisphere: DC = 2 pi * Y00, and the l=1
        // y-term = pi * sqrt(3 / (4 pi)).
        assert!((v[0] - 2.0 * PI * 0.282_094_791_773_878_14).abs() < 0.05, "{v:?}");
        assert!((v[1] - PI * (3.0 / (4.0 * PI)).sqrt()).abs() < 0.05, "{v:?}");
    }

    #[test]
    fn ground_under_the_sphere_is_shadowed() {
        let s = OracleScene::new(Preset::TwoMaterial);
        let n = Vec3::y();
        let under = s.visibility(&Vec3::new(0.0, -0.8, 0.0), &n)[0];
        let open = s.visibility(&Vec3::new(1.5, -0.8, 1.5), &n)[0];
        assert!(under < 0.5 * open, "{under} {open}");
    }

    #[test]
    fn points_lie_on_the_surfaces() {
        let s = OracleScene::new(Preset::TwoMaterial);
        let pts = s.sample_points(200, 1);
        assert_eq!(pts.len(), 200);
        for p in &pts {
            let on_sphere = ((p - s.sphere.center).norm() - s.sphere.radius).abs() < 0.02;
            let on_ground = (p.y + 0.8).abs() < 0.02;
            assert!(on_sphere || on_ground, "{p:?}");
        }
    }

    #[test]
    fn brighter_light_brightens_the_render() {
        let ds = make_oracle(Preset::LambertianSphere, &small()).unwrap();
        let cam = ds.train[0].camera.clone();
        let dim = ds.render_under(&ds.env, std::slice::from_ref(&cam)).unwrap();
        let bright = ds.render_under(&ds.env.map(|v| 2.0 * v), &[cam]).unwrap();
        let mask = dim[0].mask_bits();
        let sum = |im: &Image| -> f64 {
            (0..mask.len()).filter(|i| mask[*i]).map(|i| im.data[3 * i] as f64).sum()
        };
        assert!(sum(&bright[0].image) > sum(&dim[0].image));
    }
}
