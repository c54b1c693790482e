//! Reverse-mode gradients of the training objective, composed from the
//! analytic adjoints of each operation on the render path.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::brdf::default_lut;
use crate::envlight::{
    activate_light, light_white_loss_grad, project_light_sh, project_light_sh_adjoint, CubeMap, PrefilterOperator,
    PrefilteredEnv,
};
use crate::error::{Error, Result};
use crate::io::Image;
use crate::scene::{Gaussian, PARAMS};
use crate::shading::{LightGrads, Shader, ShadingModel};
use crate::sh::triple_tensor;
use crate::splat::{rasterize_backward, rasterize_with_state, Camera, GBuffer, RasterOptions, RasterState, ShDir, F_ALPHA, F_RAW, NF};
use crate::visibility::VisibilityGrid;

use super::loss::{loss_alpha_full_grad, loss_alpha_masked_grad, loss_rgb_grad, PerGaussianTerms};

/// Differentiable operations that can appear on the render path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Splat,
    RadianceSh,
    LightExp,
    Prefilter,
    SplitSum,
    LightSh,
    VisibilityQuery,
    CosineLobe,
    TripleProduct,
    Tonemap,
    Srgb,
    Blend,
    RgbLoss,
    AlphaLoss,
    WhiteLoss,
}

impl Op {
    pub const ALL: [Op; 15] = [
        Op::Splat,
        Op::RadianceSh,
        Op::LightExp,
        Op::Prefilter,
        Op::SplitSum,
        Op::LightSh,
        Op::VisibilityQuery,
        Op::CosineLobe,
        Op::TripleProduct,
        Op::Tonemap,
        Op::Srgb,
        Op::Blend,
        Op::RgbLoss,
        Op::AlphaLoss,
        Op::WhiteLoss,
    ];
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Set of operations with an analytic adjoint available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjointRegistry {
    ops: BTreeSet<Op>,
}

impl Default for AdjointRegistry {
    fn default() -> Self {
        Self {
            ops: Op::ALL.into_iter().collect(),
        }
    }
}

impl AdjointRegistry {
    pub fn empty() -> Self {
        Self { ops: BTreeSet::new() }
    }

    pub fn register(mut self, op: Op) -> Self {
        self.ops.insert(op);
        self
    }

    pub fn without(mut self, op: Op) -> Self {
        self.ops.remove(&op);
        self
    }

    pub fn contains(&self, op: Op) -> bool {
        self.ops.contains(&op)
    }
}

/// Alpha supervision used by an objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaTerm {
    None,
    /// MSE against the view's object mask.
    Masked { object_only: bool },
    /// MSE against 1 everywhere.
    Full,
    /// Per-Gaussian terms relative to the scene's domain sphere.
    PerGaussian(PerGaussianTerms),
}

/// What is rendered and which losses are active.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    /// Shading model for the physical branch; `None` renders raw radiance only.
    pub model: Option<ShadingModel>,
    pub lambda: [f64; 3],
    pub alpha: AlphaTerm,
    pub white_loss: bool,
    pub background: [f64; 3],
    pub sh_dir: ShDir,
    pub env_levels: usize,
    pub prefilter_samples: usize,
}

impl Objective {
    /// Operations whose adjoints the objective needs.
    pub fn path(&self) -> Vec<Op> {
        let mut p = vec![Op::Splat, Op::RadianceSh, Op::RgbLoss];
        if let Some(m) = self.model {
            p.extend([Op::LightExp, Op::Prefilter, Op::SplitSum, Op::Tonemap, Op::Srgb, Op::Blend]);
            if m.diffuse {
                p.extend([Op::LightSh, Op::VisibilityQuery, Op::CosineLobe, Op::TripleProduct]);
            }
        }
        if self.alpha != AlphaTerm::None {
            p.push(Op::AlphaLoss);
        }
        if self.white_loss {
            p.extend([Op::LightExp, Op::WhiteLoss]);
        }
        p.sort();
        p.dedup();
        p
    }
}

/// Activated light with its prefiltered pyramid and SH projection.
#[derive(Debug, Clone)]
pub struct LightContext {
    pub radiance: CubeMap,
    pub env: PrefilteredEnv,
    pub sh: [[f64; 9]; 3],
    op: Arc<PrefilterOperator>,
}

impl LightContext {
    pub fn new(raw: &CubeMap, levels: usize, samples: usize) -> Result<Self> {
        Self::from_radiance(activate_light(raw), levels, samples)
    }

    pub fn from_radiance(radiance: CubeMap, levels: usize, samples: usize) -> Result<Self> {
        if radiance.channels != 3 {
            return Err(Error::invalid("light must have 3 channels"));
        }
        let op = PrefilterOperator::cached(radiance.res, levels, samples)?;
        let env = op.apply(&radiance);
        let sh = project_light_sh(&radiance)?;
        Ok(Self { radiance, env, sh, op })
    }

    /// Gradient with respect to raw (log) texels from gradients on the
    /// pyramid and SH, accumulated into `out`.
    pub fn backward(&self, g: &LightGrads, out: &mut [f64]) {
        let mut base = self.op.adjoint(&g.levels, 3);
        project_light_sh_adjoint(self.radiance.res, &g.sh, &mut base);
        for (i, v) in base.iter().enumerate() {
            out[i] += v * self.radiance.data[i] as f64;
        }
    }
}

/// Gradients of the objective with respect to raw parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub gaussians: Vec<[f64; PARAMS]>,
    pub light: Vec<f64>,
}

impl Gradients {
    pub fn zeros(gaussians: usize, light_len: usize) -> Self {
        Self {
            gaussians: vec![[0.0; PARAMS]; gaussians],
            light: vec![0.0; light_len],
        }
    }
}

/// Forward state of one view.
#[derive(Debug, Clone)]
pub struct Forward {
    pub gbuffer: GBuffer,
    pub image: Image,
    state: RasterState,
}

/// Per-view loss values.
#[derive(Debug, Clone)]
pub struct ViewEval {
    pub rgb: f64,
    pub alpha: f64,
    pub image: Image,
}

/// A training view.
#[derive(Debug, Clone, Copy)]
pub struct ViewRef<'a> {
    pub camera: &'a Camera,
    pub image: &'a Image,
    pub mask: Option<&'a Image>,
}

/// Composite of raw radiance over the background: `S_raw + T * bg`.
pub fn raw_composite(gb: &GBuffer, background: [f64; 3]) -> Image {
    let mut im = Image::new(gb.width, gb.height, 3);
    for p in 0..gb.width * gb.height {
        for c in 0..3 {
            im.data[3 * p + c] = (gb.sums[p * NF + F_RAW + c] + gb.trans[p] * background[c]) as f32;
        }
    }
    im
}

#[derive(Debug, Clone)]
pub struct GradientEngine {
    obj: Objective,
    path: Vec<Op>,
}

impl GradientEngine {
    /// Fails if any operation the objective needs has no registered adjoint.
    pub fn new(registry: &AdjointRegistry, obj: Objective) -> Result<Self> {
        let path = obj.path();
        if let Some(op) = path.iter().find(|op| !registry.contains(**op)) {
            return Err(Error::State(format!("no adjoint registered for operation {op}")));
        }
        Ok(Self { obj, path })
    }

    pub fn objective(&self) -> &Objective {
        &self.obj
    }

    pub fn path(&self) -> &[Op] {
        &self.path
    }

    fn shader<'a>(&self, light: &'a LightContext, grid: Option<&'a VisibilityGrid>, model: ShadingModel) -> Shader<'a> {
        Shader {
            env: &light.env,
            light_sh: &light.sh,
            grid,
            lut: default_lut(),
            tensor: triple_tensor(),
            model,
            background: self.obj.background,
        }
    }

    fn check_inputs(&self, light: Option<&LightContext>, grid: Option<&VisibilityGrid>) -> Result<()> {
        if let Some(m) = self.obj.model {
            if light.is_none() {
                return Err(Error::State("physical shading needs a light context".into()));
            }
            if m.diffuse && grid.is_none() {
                return Err(Error::State(
                    "diffuse shading needs a baked visibility grid; run bake-visibility first".into(),
                ));
            }
        }
        Ok(())
    }

    /// Renders one view.
    pub fn forward(
        &self,
        gaussians: &[Gaussian],
        light: Option<&LightContext>,
        grid: Option<&VisibilityGrid>,
        cam: &Camera,
    ) -> Result<Forward> {
        self.check_inputs(light, grid)?;
        let opts = RasterOptions {
            sh_dir: self.obj.sh_dir,
            fields: true,
        };
        let (gbuffer, state) = rasterize_with_state(gaussians, cam, &opts);
        let image = match (self.obj.model, light) {
            (Some(m), Some(l)) => self.shader(l, grid, m).shade_image(&gbuffer, cam),
            _ => raw_composite(&gbuffer, self.obj.background),
        };
        Ok(Forward { gbuffer, image, state })
    }

    /// Accumulates gradients given the loss gradient w.r.t. the output image
    /// (3 per pixel) and w.r.t. the splatted alpha map (1 per pixel).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        gaussians: &[Gaussian],
        light: Option<&LightContext>,
        grid: Option<&VisibilityGrid>,
        cam: &Camera,
        fwd: &Forward,
        g_image: &[f64],
        g_alpha: Option<&[f64]>,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_inputs(light, grid)?;
        let gb = &fwd.gbuffer;
        let npx = gb.width * gb.height;
        let (mut g_sums, g_trans) = match (self.obj.model, light) {
            (Some(m), Some(l)) => {
                let sg = self.shader(l, grid, m).shade_backward(gb, cam, g_image);
                l.backward(&sg.light, &mut grads.light);
                (sg.sums, sg.trans)
            }
            _ => {
                let mut gs = vec![0.0; npx * NF];
                let mut gt = vec![0.0; npx];
                let bg = self.obj.background;
                for p in 0..npx {
                    for c in 0..3 {
                        let g = g_image[3 * p + c];
                        gs[p * NF + F_RAW + c] = g;
                        gt[p] += g * bg[c];
                    }
                }
                (gs, gt)
            }
        };
        if let Some(ga) = g_alpha {
            for p in 0..npx {
                g_sums[p * NF + F_ALPHA] += ga[p];
            }
        }
        let pg = rasterize_backward(gaussians, cam, &fwd.state, gb, &g_sums, &g_trans);
        for (acc, g) in grads.gaussians.iter_mut().zip(&pg) {
            for k in 0..PARAMS {
                acc[k] += g[k];
            }
        }
        Ok(())
    }

    /// Loss terms of one view and, when `grads` is given, their weighted
    /// gradients.
    pub fn evaluate_view(
        &self,
        gaussians: &[Gaussian],
        light: Option<&LightContext>,
        grid: Option<&VisibilityGrid>,
        view: ViewRef<'_>,
        grads: Option<&mut Gradients>,
    ) -> Result<ViewEval> {
        let fwd = self.forward(gaussians, light, grid, view.camera)?;
        let [l1, l2, _] = self.obj.lambda;
        let (rgb, g_rgb) = loss_rgb_grad(&fwd.image, view.image)?;
        let npx = fwd.gbuffer.width * fwd.gbuffer.height;
        let alpha_map: Vec<f64> = (0..npx).map(|p| fwd.gbuffer.sums[p * NF + F_ALPHA]).collect();
        let alpha = match (self.obj.alpha, view.mask) {
            (AlphaTerm::Masked { object_only }, Some(mask)) => {
                if mask.width * mask.height != npx || mask.channels != 1 {
                    return Err(Error::invalid("mask size does not match the view"));
                }
                let m: Vec<f64> = mask.data.iter().map(|v| *v as f64).collect();
                Some(loss_alpha_masked_grad(&alpha_map, &m, object_only)?)
            }
            (AlphaTerm::Full, _) => Some(loss_alpha_full_grad(&alpha_map)),
            _ => None,
        };
        if let Some(grads) = grads {
            let g_image: Vec<f64> = g_rgb.iter().map(|g| g * l1).collect();
            let g_alpha = alpha.as_ref().map(|(_, g)| g.iter().map(|v| v * l2).collect::<Vec<f64>>());
            self.backward(gaussians, light, grid, view.camera, &fwd, &g_image, g_alpha.as_deref(), grads)?;
        }
        Ok(ViewEval {
            rgb,
            alpha: alpha.map_or(0.0, |a| a.0),
            image: fwd.image,
        })
    }

    /// Light regularizer on the activated light, weighted gradient added to
    /// `grads.light`.
    pub fn white_loss(&self, light: &LightContext, grads: Option<&mut Gradients>) -> f64 {
        if !self.obj.white_loss {
            return 0.0;
        }
        let (l, g) = light_white_loss_grad(&light.radiance);
        if let Some(grads) = grads {
            let w = self.obj.lambda[2];
            for (i, gi) in g.iter().enumerate() {
                grads.light[i] += w * gi * light.radiance.data[i] as f64;
            }
        }
        l
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use crate::scene::{init_scene, InitConfig, ALPHA, SH};
    use crate::shading::ShadingModel;
    use crate::math::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(model: Option<ShadingModel>) -> Objective {
        Objective {
            model,
            lambda: [1.0, 0.08, 0.003],
            alpha: AlphaTerm::None,
            white_loss: false,
            background: [1.0; 3],
            sh_dir: ShDir::PixelRay,
            env_levels: 4,
            prefilter_samples: 16,
        }
    }

    #[test]
    fn missing_adjoint_fails_construction() {
        let obj = objective(Some(ShadingModel::FULL));
        for op in obj.path() {
            let reg = AdjointRegistry::default().without(op);
            let err = GradientEngine::new(&reg, obj).unwrap_err();
            assert!(matches!(err, Error::State(_)), "{err}");
        }
        assert!(GradientEngine::new(&AdjointRegistry::default(), obj).is_ok());
        // Raw-only objectives do not touch the light.
        let reg = AdjointRegistry::default().without(Op::Prefilter);
        assert!(GradientEngine::new(&reg, objective(None)).is_ok());
    }

    fn small_scene(seed: u64) -> Vec<Gaussian> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect();
        let mut gs = init_scene(&pts, None, &InitConfig { light_res: 8, opacity: 0.6, ..Default::default() })
            .unwrap()
            .gaussians;
        for g in gs.iter_mut() {
            for k in 0..48 {
                g.raw[SH + k] = rng.gen_range(-0.3..0.3);
            }
        }
        gs
    }

    #[test]
    fn frozen_alpha_matches_raw_only_path() {
        let gs = small_scene(1);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 40.0, 32, 24).unwrap();
        let light = LightContext::new(&CubeMap::constant(16, &[0.3; 3]), 4, 16).unwrap();
        let grid = VisibilityGrid::new(Vec3::repeat(-1.0), Vec3::repeat(1.0), [2, 2, 2]).unwrap();
        let raw = GradientEngine::new(&AdjointRegistry::default(), objective(None)).unwrap();
        let full = GradientEngine::new(&AdjointRegistry::default(), objective(Some(ShadingModel::FULL))).unwrap();
        let a = raw.forward(&gs, None, None, &cam).unwrap();
        let b = full.forward(&gs, Some(&light), Some(&grid), &cam).unwrap();
        assert_eq!(a.image.data, b.image.data);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g_img: Vec<f64> = (0..32 * 24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ga = Gradients::zeros(gs.len(), light.radiance.data.len());
        let mut gb = ga.clone();
        raw.backward(&gs, None, None, &cam, &a, &g_img, None, &mut ga).unwrap();
        full.backward(&gs, Some(&light), Some(&grid), &cam, &b, &g_img, None, &mut gb).unwrap();
        assert_eq!(ga.gaussians, gb.gaussians);
        assert!(gb.light.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn diffuse_without_grid_is_a_state_error() {
        let gs = small_scene(3);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 40.0, 16, 16).unwrap();
        let light = LightContext::new(&CubeMap::constant(16, &[0.3; 3]), 4, 16).unwrap();
        let e = GradientEngine::new(&AdjointRegistry::default(), objective(Some(ShadingModel::FULL))).unwrap();
        assert!(matches!(e.forward(&gs, Some(&light), None, &cam), Err(Error::State(_))));
    }

    #[test]
    fn alpha_gradient_reaches_raw_alpha() {
        let mut gs = small_scene(4);
        for g in gs.iter_mut() {
            g.raw[ALPHA] = logit(0.3) as f32;
        }
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 40.0, 16, 16).unwrap();
        let light = LightContext::new(&CubeMap::constant(16, &[0.3; 3]), 4, 16).unwrap();
        let mut obj = objective(Some(ShadingModel::SPECULAR_ONLY));
        obj.alpha = AlphaTerm::Full;
        let e = GradientEngine::new(&AdjointRegistry::default(), obj).unwrap();
        let target = Image::filled(16, 16, &[0.5; 3]);
        let mut g = Gradients::zeros(gs.len(), light.radiance.data.len());
        let v = e
            .evaluate_view(&gs, Some(&light), None, ViewRef { camera: &cam, image: &target, mask: None }, Some(&mut g))
            .unwrap();
        assert!(v.alpha > 0.0);
        assert!(g.gaussians.iter().any(|p| p[ALPHA] != 0.0));
        assert!(g.light.iter().any(|v| *v != 0.0));
    }
}
