//! Image metrics, normal error, light-scale alignment, relighting and
//! material editing.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::brdf::default_lut;
use crate::envlight::CubeMap;
use crate::error::{Error, Result};
use crate::io::Image;
use crate::math::{logit, Vec3};
use crate::scene::{Scene, ALBEDO, ROUGH};
use crate::shading::{ShadedFrame, Shader, ShadingModel};
use crate::sh::triple_tensor;
use crate::splat::{rasterize, Camera, GBuffer, RasterOptions, ShDir};
use crate::train::engine::{raw_composite, LightContext};
use crate::train::Stage;

pub use crate::train::loss::ssim;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::invalid("psnr needs images of equal shape"));
    }
    let n = pred.data.len().max(1) as f64;
    let mse: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR over the pixels where `mask` is set.
pub fn psnr_masked(pred: &Image, gt: &Image, mask: &[bool]) -> Result<f64> {
    if !pred.same_shape(gt) || mask.len() != pred.width * pred.height {
        return Err(Error::invalid("psnr needs images and mask of equal shape"));
    }
    let ch = pred.channels;
    let (mut s, mut n) = (0.0, 0usize);
    for (p, m) in mask.iter().enumerate() {
        if *m {
            for c in 0..ch {
                let d = pred.data[p * ch + c] as f64 - gt.data[p * ch + c] as f64;
                s += d * d;
            }
            n += ch;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty mask"));
    }
    if s <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (n as f64 / s).log10()).min(PSNR_CAP))
}

/// Mean angular error in degrees over masked pixels.
pub fn normal_mae(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::invalid("normal maps and mask differ in size"));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            let c = pred[i].normalize().dot(&gt[i].normalize()).clamp(-1.0, 1.0);
            s += c.acos().to_degrees();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("normal error needs a non-empty mask"));
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    EnvToEnv,
    PerImage,
    None,
}

/// Channel-wise factors applied to a ground-truth light before relighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAlignment {
    pub scale: [f64; 3],
    pub mode: AlignMode,
}

impl ScaleAlignment {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            mode: AlignMode::None,
        }
    }

    pub fn apply(&self, env: &CubeMap) -> CubeMap {
        let mut out = env.clone();
        let ch = env.channels;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v = (*v as f64 * self.scale[(i % ch).min(2)]) as f32;
        }
        out
    }
}

fn ratio(num: [f64; 3], den: [f64; 3], mode: AlignMode) -> Result<ScaleAlignment> {
    let mut scale = [0.0; 3];
    for c in 0..3 {
        if !(den[c] > 0.0) {
            return Err(Error::invalid(format!("reference channel {c} has zero energy")));
        }
        scale[c] = num[c] / den[c];
        if !(scale[c] > 0.0) {
            return Err(Error::invalid(format!("predicted channel {c} has zero energy")));
        }
    }
    Ok(ScaleAlignment { scale, mode })
}

/// Per channel, the ratio of solid-angle weighted means of `pred` over `gt`.
pub fn compute_env_alignment(pred: &CubeMap, gt: &CubeMap) -> Result<ScaleAlignment> {
    if pred.channels != 3 || gt.channels != 3 {
        return Err(Error::invalid("alignment needs RGB cubemaps"));
    }
    let gt = gt.resample(pred.res);
    let p = pred.weighted_mean();
    let g = gt.weighted_mean();
    ratio([p[0], p[1], p[2]], [g[0], g[1], g[2]], AlignMode::EnvToEnv)
}

/// Per channel, the ratio of mean `pred` over mean `gt` on masked pixels.
pub fn compute_image_alignment(pred: &Image, gt: &Image, mask: &[bool]) -> Result<ScaleAlignment> {
    if !pred.same_shape(gt) || pred.channels != 3 || mask.len() != pred.width * pred.height {
        return Err(Error::invalid("alignment needs RGB images and a mask of equal shape"));
    }
    let (mut p, mut g) = ([0.0; 3], [0.0; 3]);
    for (i, m) in mask.iter().enumerate() {
        if *m {
            for c in 0..3 {
                p[c] += pred.data[3 * i + c] as f64;
                g[c] += gt.data[3 * i + c] as f64;
            }
        }
    }
    ratio(p, g, AlignMode::PerImage)
}

/// Final-render settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub env_levels: usize,
    pub prefilter_samples: usize,
    pub sh_dir: ShDir,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            env_levels: 6,
            prefilter_samples: 128,
            sh_dir: ShDir::PixelRay,
        }
    }
}

/// Shading model matching the last stage a scene finished.
pub fn model_for(scene: &Scene) -> Option<ShadingModel> {
    match scene.completed {
        None | Some(Stage::Pretrain) => None,
        Some(Stage::Specular) => Some(ShadingModel::SPECULAR_ONLY),
        Some(Stage::Diffuse) | Some(Stage::Refine) => {
            if scene.visibility.is_some() {
                Some(ShadingModel::FULL)
            } else {
                Some(ShadingModel::SPECULAR_ONLY)
            }
        }
    }
}

/// Renders `scene` from `cam` under `light` with the given model.
pub fn render_with_light(
    scene: &Scene,
    cam: &Camera,
    light: &LightContext,
    model: Option<ShadingModel>,
    settings: &RenderSettings,
) -> Result<(GBuffer, ShadedFrame)> {
    let opts = RasterOptions {
        sh_dir: settings.sh_dir,
        fields: true,
    };
    let gb = rasterize(&scene.gaussians, cam, &opts);
    let frame = match model {
        Some(m) => {
            if m.diffuse && scene.visibility.is_none() {
                return Err(Error::State("diffuse shading needs a baked visibility grid".into()));
            }
            let shader = Shader {
                env: &light.env,
                light_sh: &light.sh,
                grid: scene.visibility.as_ref(),
                lut: default_lut(),
                tensor: triple_tensor(),
                model: m,
                background: settings.background,
            };
            shader.shade_frame(&gb, cam)
        }
        None => {
            let shader = Shader {
                env: &light.env,
                light_sh: &light.sh,
                grid: None,
                lut: default_lut(),
                tensor: triple_tensor(),
                model: ShadingModel::SPECULAR_ONLY,
                background: settings.background,
            };
            let mut f = shader.shade_frame(&gb, cam);
            f.image = raw_composite(&gb, settings.background);
            f
        }
    };
    Ok((gb, frame))
}

/// Renders with the scene's own light and its stage's model.
pub fn render_view(scene: &Scene, cam: &Camera, settings: &RenderSettings) -> Result<(GBuffer, ShadedFrame)> {
    let light = LightContext::new(&scene.light, settings.env_levels, settings.prefilter_samples)?;
    render_with_light(scene, cam, &light, model_for(scene), settings)
}

/// Renders under `new_env` (linear radiance) scaled by `align`.
pub fn relight(
    scene: &Scene,
    new_env: &CubeMap,
    align: &ScaleAlignment,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<ShadedFrame> {
    let env = align.apply(new_env);
    let light = LightContext::from_radiance(env, settings.env_levels, settings.prefilter_samples)?;
    Ok(render_with_light(scene, cam, &light, model_for(scene), settings)?.1)
}

/// Material edits applied per Gaussian.
pub enum MaterialEdit<'a> {
    /// `r <- 1 - r`.
    FlipRoughness,
    /// `c <- f(position)`.
    SetAlbedo(&'a (dyn Fn(&Vec3) -> [f64; 3] + Sync)),
}

/// Returns a copy of `scene` with `edits` applied in order.
pub fn edit_material(scene: &Scene, edits: &[MaterialEdit<'_>]) -> Scene {
    let mut out = scene.clone();
    for e in edits {
        match e {
            MaterialEdit::FlipRoughness => {
                // sigmoid(-x) = 1 - sigmoid(x).
                for g in out.gaussians.iter_mut() {
                    g.raw[ROUGH] = -g.raw[ROUGH];
                }
            }
            MaterialEdit::SetAlbedo(f) => {
                out.gaussians.par_iter_mut().for_each(|g| {
                    let c = f(&g.position());
                    for k in 0..3 {
                        g.raw[ALBEDO + k] = logit(c[k].clamp(1e-7, 1.0 - 1e-7)) as f32;
                    }
                });
            }
        }
    }
    out
}

/// Per-view metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("view,psnr,ssim,mae\n");
    for r in rows {
        let mae = r.mae.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.view, r.psnr, r.ssim, mae);
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Blended normals per pixel (`None` where nothing was splatted).
pub fn normal_map(gb: &GBuffer) -> Vec<Option<Vec3>> {
    (0..gb.width * gb.height).map(|p| gb.normal(p)).collect()
}

/// Clamps every value into [0, 1].
pub fn clamp01(im: &Image) -> Image {
    let mut o = im.clone();
    for v in o.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_scene, InitConfig};

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, &[0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, &[0.4, 0.4, 0.4]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let mut check = Image::new(4, 4, 1);
        for y in 0..4 {
            for x in 0..4 {
                check.pixel_mut(x, y)[0] = ((x + y) % 2) as f32;
            }
        }
        let zero = Image::new(4, 4, 1);
        assert!((psnr(&check, &zero).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn mae_examples() {
        let n = vec![Vec3::z(); 4];
        let m = vec![true; 4];
        assert_eq!(normal_mae(&n, &n, &m).unwrap(), 0.0);
        let x = vec![Vec3::x(); 4];
        assert!((normal_mae(&n, &x, &m).unwrap() - 90.0).abs() < 1e-9);
        let mixed = vec![Vec3::z(), Vec3::z(), -Vec3::z(), -Vec3::z()];
        assert!((normal_mae(&mixed, &n, &m).unwrap() - 90.0).abs() < 1e-9);
        assert!(matches!(normal_mae(&n, &n, &[false; 4]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn alignment_examples() {
        let gt = CubeMap::from_fn(8, 3, |d| vec![1.0 + d.x * 0.5, 0.7, 0.2 + d.z.abs()]);
        let s = compute_env_alignment(&gt.map(|v| 2.0 * v), &gt).unwrap();
        for v in s.scale {
            assert!((v - 2.0).abs() < 1e-6);
        }
        let s = compute_env_alignment(&gt, &gt).unwrap();
        assert!(s.scale.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let mut red = gt.clone();
        for t in 0..red.texel_count() {
            red.data[3 * t] *= 3.0;
        }
        let s = compute_env_alignment(&red, &gt).unwrap();
        assert!((s.scale[0] - 3.0).abs() < 1e-5 && (s.scale[1] - 1.0).abs() < 1e-9);
        let dark = CubeMap::constant(8, &[0.0, 1.0, 1.0]);
        assert!(compute_env_alignment(&gt, &dark).is_err());
    }

    fn scene() -> Scene {
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.05, 0.0, 0.1 * (i % 3) as f64)).collect();
        init_scene(&pts, None, &InitConfig { light_res: 8, roughness: 0.99, ..Default::default() }).unwrap()
    }

    #[test]
    fn flip_roughness_examples() {
        let s = scene();
        let f = edit_material(&s, &[MaterialEdit::FlipRoughness]);
        for g in &f.gaussians {
            assert!((g.roughness() - 0.01).abs() < 1e-6);
        }
        let ff = edit_material(&f, &[MaterialEdit::FlipRoughness]);
        for (a, b) in ff.gaussians.iter().zip(&s.gaussians) {
            assert!((a.raw[ROUGH] - b.raw[ROUGH]).abs() < 1e-6);
            assert_eq!(&a.raw[..ROUGH], &b.raw[..ROUGH]);
        }
    }

    #[test]
    fn set_albedo_examples() {
        let red = |_: &Vec3| [1.0, 0.0, 0.0];
        let s = edit_material(&scene(), &[MaterialEdit::SetAlbedo(&red)]);
        for g in &s.gaussians {
            let c = g.albedo();
            assert!((c[0] - 1.0).abs() < 1e-6 && c[1] < 1e-6 && c[2] < 1e-6);
        }
    }
}
