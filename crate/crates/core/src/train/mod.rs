//! Four-stage progressive distillation.

pub mod engine;
pub mod loss;
pub mod optim;

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::{clamp01, psnr};
use crate::io::Image;
use crate::math::{logit, Vec3};
use crate::scene::{Gaussian, Scene, ALPHA, ALPHA_OFF, ALPHA_ON, LOG_SCALE, METAL, OPACITY, PARAMS, ROT, ROUGH, SH};
use crate::shading::ShadingModel;
use crate::splat::{Camera, ShDir};

use engine::{AdjointRegistry, AlphaTerm, Gradients, GradientEngine, LightContext, Objective, ViewRef};
use loss::PerGaussianTerms;
use optim::Adam;

/// Training stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Raw radiance only, alpha fixed at 0.
    Pretrain,
    /// Specular-only physical model (metallic fixed at 1).
    Specular,
    /// Full model with diffuse term and visibility.
    Diffuse,
    /// Full model, reduced alpha learning rate.
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Specular, Stage::Diffuse, Stage::Refine];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Specular => "specular",
            Stage::Diffuse => "diffuse",
            Stage::Refine => "refine",
        }
    }

    /// CLI command that runs this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Specular => "distill-specular",
            Stage::Diffuse => "distill-diffuse",
            Stage::Refine => "refine",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).and_then(Stage::from_index)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage '{s}'")))
    }
}

/// Parameter groups with their own learning rate and freeze switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Albedo,
    Roughness,
    Metallic,
    Sh,
    Alpha,
    Light,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Albedo,
        ParamGroup::Roughness,
        ParamGroup::Metallic,
        ParamGroup::Sh,
        ParamGroup::Alpha,
        ParamGroup::Light,
    ];

    /// Group of Gaussian parameter slot `k`.
    pub fn of_slot(k: usize) -> ParamGroup {
        match k {
            _ if k < ROT => ParamGroup::Position,
            _ if k < LOG_SCALE => ParamGroup::Rotation,
            _ if k < OPACITY => ParamGroup::Scale,
            OPACITY => ParamGroup::Opacity,
            _ if k < ROUGH => ParamGroup::Albedo,
            ROUGH => ParamGroup::Roughness,
            METAL => ParamGroup::Metallic,
            ALPHA => ParamGroup::Alpha,
            _ => ParamGroup::Sh,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Albedo => "albedo",
            ParamGroup::Roughness => "roughness",
            ParamGroup::Metallic => "metallic",
            ParamGroup::Sh => "sh",
            ParamGroup::Alpha => "alpha",
            ParamGroup::Light => "light",
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group '{s}'")))
    }
}

/// Per-group Adam learning rates. Position rates are relative to the camera
/// extent of the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    /// Final position rate of the exponential decay (pretrain only).
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub metallic: f64,
    pub sh: f64,
    pub alpha: f64,
    pub light: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 5e-3,
            scale: 5e-3,
            opacity: 5e-2,
            albedo: 5e-3,
            roughness: 5e-3,
            metallic: 5e-3,
            sh: 2.5e-3,
            alpha: 5e-3,
            light: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Position => self.position,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Albedo => self.albedo,
            ParamGroup::Roughness => self.roughness,
            ParamGroup::Metallic => self.metallic,
            ParamGroup::Sh => self.sh,
            ParamGroup::Alpha => self.alpha,
            ParamGroup::Light => self.light,
        }
    }

    pub fn set(&mut self, g: ParamGroup, v: f64) {
        *match g {
            ParamGroup::Position => &mut self.position,
            ParamGroup::Rotation => &mut self.rotation,
            ParamGroup::Scale => &mut self.scale,
            ParamGroup::Opacity => &mut self.opacity,
            ParamGroup::Albedo => &mut self.albedo,
            ParamGroup::Roughness => &mut self.roughness,
            ParamGroup::Metallic => &mut self.metallic,
            ParamGroup::Sh => &mut self.sh,
            ParamGroup::Alpha => &mut self.alpha,
            ParamGroup::Light => &mut self.light,
        } = v;
    }
}

/// Settings for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: usize,
    /// First iteration to run; earlier ones are taken as already done.
    pub start_iteration: usize,
    pub lr: LearningRates,
    /// Weights of the rgb, alpha and light losses.
    pub lambda: [f64; 3],
    pub frozen: BTreeSet<ParamGroup>,
    pub real_scene: bool,
    pub maskless: bool,
    /// Restrict the masked alpha loss to object pixels.
    pub alpha_object_only: bool,
    pub seed: u64,
    /// Pretrain only: prune low-opacity Gaussians every this many iterations
    /// (0 disables).
    pub prune_every: usize,
    pub prune_opacity: f64,
    /// Held-out PSNR cadence (0 disables).
    pub psnr_every: usize,
    pub checkpoint_every: usize,
    pub env_levels: usize,
    pub prefilter_samples: usize,
    pub sh_dir: ShDir,
    /// Alpha assigned to every Gaussian when the specular stage starts.
    pub alpha_init: f64,
    /// Specular stage: iterations at the start that fit light, albedo and
    /// Gaussian shape to the physical branch alone, with roughness held at
    /// `warmup_roughness`; alpha and the radiance SH wait.
    pub warmup: usize,
    pub warmup_roughness: f64,
    /// Specular stage: perturb the SH DC band of high-alpha Gaussians.
    pub radiance_jitter: bool,
    pub jitter_every: usize,
    pub jitter_sigma: f64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        let mut lr = LearningRates::default();
        let (iterations, frozen): (usize, &[ParamGroup]) = match stage {
            Stage::Pretrain => (
                3000,
                &[
                    ParamGroup::Alpha,
                    ParamGroup::Albedo,
                    ParamGroup::Roughness,
                    ParamGroup::Metallic,
                    ParamGroup::Light,
                ],
            ),
            Stage::Specular => (2000, &[ParamGroup::Position, ParamGroup::Metallic]),
            Stage::Diffuse => (2000, &[ParamGroup::Position]),
            Stage::Refine => (1000, &[ParamGroup::Position]),
        };
        if stage == Stage::Refine {
            lr.alpha *= 0.5;
        }
        Self {
            stage,
            iterations,
            start_iteration: 0,
            lr,
            lambda: [1.0, 0.08, 0.003],
            frozen: frozen.iter().copied().collect(),
            real_scene: false,
            maskless: false,
            alpha_object_only: false,
            seed: 0,
            prune_every: if stage == Stage::Pretrain { 500 } else { 0 },
            prune_opacity: 0.005,
            psnr_every: 100,
            checkpoint_every: 0,
            env_levels: 6,
            prefilter_samples: 64,
            sh_dir: ShDir::PixelRay,
            alpha_init: 0.01,
            warmup: if stage == Stage::Specular { 500 } else { 0 },
            warmup_roughness: 0.1,
            radiance_jitter: false,
            jitter_every: 1000,
            jitter_sigma: 0.05,
        }
    }

    /// Effective frozen set, including the real-scene light freeze.
    pub fn frozen_groups(&self) -> BTreeSet<ParamGroup> {
        let mut f = self.frozen.clone();
        if self.real_scene && self.stage == Stage::Refine {
            f.insert(ParamGroup::Light);
        }
        f
    }

    fn alpha_term(&self) -> AlphaTerm {
        match self.stage {
            Stage::Pretrain => AlphaTerm::None,
            Stage::Specular if self.maskless => AlphaTerm::PerGaussian(PerGaussianTerms {
                inside: false,
                outside: true,
            }),
            Stage::Specular => AlphaTerm::None,
            Stage::Refine if self.real_scene => AlphaTerm::Full,
            _ if self.maskless => AlphaTerm::PerGaussian(PerGaussianTerms {
                inside: true,
                outside: true,
            }),
            _ => AlphaTerm::Masked {
                object_only: self.alpha_object_only,
            },
        }
    }

    /// Render and loss setup of this stage.
    pub fn objective(&self, background: [f64; 3]) -> Objective {
        let model = match self.stage {
            Stage::Pretrain => None,
            Stage::Specular => Some(ShadingModel::SPECULAR_ONLY),
            Stage::Diffuse | Stage::Refine => Some(ShadingModel::FULL),
        };
        let frozen = self.frozen_groups();
        Objective {
            model,
            lambda: self.lambda,
            alpha: self.alpha_term(),
            white_loss: matches!(self.stage, Stage::Diffuse | Stage::Refine) && !frozen.contains(&ParamGroup::Light),
            background,
            sh_dir: self.sh_dir,
            env_levels: self.env_levels,
            prefilter_samples: self.prefilter_samples,
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub total: f64,
    pub rgb: f64,
    pub alpha: f64,
    pub light: f64,
    pub psnr: Option<f64>,
}

/// Loss log of a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,total,rgb,alpha,light,psnr";

    pub fn csv_row(r: &LossRow) -> String {
        let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        format!("{},{:.9e},{:.9e},{:.9e},{:.9e},{}", r.iteration, r.total, r.rgb, r.alpha, r.light, psnr)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", Self::csv_row(r));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last_psnr(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.psnr)
    }
}

/// A decoded training view in display space.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
    pub mask: Option<Image>,
}

impl TrainView {
    pub fn as_ref(&self) -> ViewRef<'_> {
        ViewRef {
            camera: &self.camera,
            image: &self.image,
            mask: self.mask.as_ref(),
        }
    }
}

/// Views used by a stage.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub views: &'a [TrainView],
    pub background: [f64; 3],
    pub holdout: Option<&'a TrainView>,
}

/// 1.1 times the largest camera distance from the mean camera position.
pub fn camera_extent(views: &[TrainView]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = views.iter().map(|v| v.camera.position()).collect();
    let mean = centers.iter().fold(Vec3::zeros(), |a, c| a + c) / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

fn check_precondition(scene: &Scene, cfg: &StageConfig) -> Result<()> {
    if let Some(prev) = cfg.stage.previous() {
        if scene.completed.is_none_or(|c| c < prev) {
            return Err(Error::State(format!(
                "stage {} needs a scene that finished {}; run '{}' first",
                cfg.stage,
                prev,
                prev.command()
            )));
        }
    }
    if matches!(cfg.stage, Stage::Diffuse | Stage::Refine) && scene.visibility.is_none() {
        return Err(Error::State(format!(
            "stage {} needs a baked visibility grid; run 'bake-visibility' first",
            cfg.stage
        )));
    }
    if cfg.maskless && cfg.stage != Stage::Pretrain && scene.domain.is_none() {
        return Err(Error::invalid("maskless training needs a domain sphere"));
    }
    Ok(())
}

/// Groups trained during the specular warm-up.
const WARMUP_GROUPS: [ParamGroup; 5] = [
    ParamGroup::Albedo,
    ParamGroup::Rotation,
    ParamGroup::Scale,
    ParamGroup::Opacity,
    ParamGroup::Light,
];

/// Runs one stage on `scene` in place.
pub fn run_stage(scene: &mut Scene, data: TrainSet<'_>, cfg: &StageConfig) -> Result<LossReport> {
    run_stage_with(scene, data, cfg, &mut |_, _| Ok(()))
}

/// [`run_stage`] calling `checkpoint(scene, iterations_done)` every
/// `cfg.checkpoint_every` iterations.
pub fn run_stage_with(
    scene: &mut Scene,
    data: TrainSet<'_>,
    cfg: &StageConfig,
    checkpoint: &mut dyn FnMut(&Scene, usize) -> Result<()>,
) -> Result<LossReport> {
    if data.views.is_empty() {
        return Err(Error::invalid("training needs at least one view"));
    }
    check_precondition(scene, cfg)?;
    let obj = cfg.objective(data.background);
    let engine = GradientEngine::new(&AdjointRegistry::default(), obj)?;
    let frozen = cfg.frozen_groups();

    if cfg.start_iteration == 0 {
        match cfg.stage {
            Stage::Pretrain => {
                for g in scene.gaussians.iter_mut() {
                    g.raw[ALPHA] = ALPHA_OFF;
                }
            }
            Stage::Specular => {
                let a = logit(cfg.alpha_init) as f32;
                let r = logit(cfg.warmup_roughness) as f32;
                for g in scene.gaussians.iter_mut() {
                    g.raw[ALPHA] = a;
                    if cfg.warmup > 0 {
                        g.raw[ROUGH] = r;
                    }
                }
            }
            _ => {}
        }
    }

    let extent = camera_extent(data.views);
    let mut rates = [0.0; PARAMS];
    for (k, r) in rates.iter_mut().enumerate() {
        let g = ParamGroup::of_slot(k);
        if !frozen.contains(&g) {
            *r = cfg.lr.get(g);
        }
    }
    let light_rate = if frozen.contains(&ParamGroup::Light) { 0.0 } else { cfg.lr.light };
    let needs_light = obj.model.is_some() || obj.white_loss;

    let mut adam = Adam::new(scene.gaussians.len() * PARAMS);
    let mut adam_light = Adam::new(scene.light.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(cfg.stage.index() as u64));
    let mut order: Vec<usize> = Vec::new();
    let mut report = LossReport::default();
    let [l1, l2, l3] = cfg.lambda;
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;

    for it in cfg.start_iteration..cfg.iterations {
        if order.is_empty() {
            order = (0..data.views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().unwrap_or(0);
        let light = if needs_light {
            Some(LightContext::new(&scene.light, cfg.env_levels, cfg.prefilter_samples)?)
        } else {
            None
        };
        let grid = scene.visibility.as_ref();
        let mut grads = Gradients::zeros(scene.gaussians.len(), scene.light.data.len());
        let warm = cfg.stage == Stage::Specular && it < cfg.warmup;
        let shown: Cow<'_, [Gaussian]> = if warm {
            let mut gs = scene.gaussians.clone();
            for g in gs.iter_mut() {
                g.raw[ALPHA] = ALPHA_ON;
            }
            Cow::Owned(gs)
        } else {
            Cow::Borrowed(&scene.gaussians)
        };
        let ev = engine.evaluate_view(&shown, light.as_ref(), grid, data.views[vi].as_ref(), Some(&mut grads))?;
        let light_loss = light.as_ref().map_or(0.0, |l| engine.white_loss(l, Some(&mut grads)));
        let mut alpha_loss = ev.alpha;
        if let AlphaTerm::PerGaussian(terms) = obj.alpha {
            if let Some(dom) = scene.domain {
                let (l, g) = loss::loss_alpha_per_gaussian_grad(&scene.gaussians, &dom, terms);
                alpha_loss = l;
                for (acc, gi) in grads.gaussians.iter_mut().zip(&g) {
                    acc[ALPHA] += l2 * gi;
                }
            }
        }

        // Position rate decays exponentially over the pretrain stage.
        let pos_rate = if frozen.contains(&ParamGroup::Position) {
            0.0
        } else if cfg.stage == Stage::Pretrain {
            let t = it as f64 / cfg.iterations.max(1) as f64;
            let (a, b) = (cfg.lr.position.ln(), cfg.lr.position_final.max(1e-20).ln());
            (a + (b - a) * t).exp() * extent
        } else {
            cfg.lr.position * extent
        };
        for (gi, g) in scene.gaussians.iter_mut().enumerate() {
            let gg = &grads.gaussians[gi];
            for k in 0..PARAMS {
                let rate = if warm && !WARMUP_GROUPS.contains(&ParamGroup::of_slot(k)) {
                    0.0
                } else if k < ROT {
                    pos_rate
                } else {
                    rates[k]
                };
                adam.update(gi * PARAMS + k, &mut g.raw[k], gg[k], rate);
            }
        }
        if light_rate > 0.0 && needs_light {
            adam_light.step(&mut scene.light.data, &grads.light, |_| light_rate);
        }

        let done = it + 1;
        if cfg.stage == Stage::Pretrain && cfg.prune_every > 0 && done % cfg.prune_every == 0 && done < cfg.iterations {
            let keep: Vec<bool> = scene.gaussians.iter().map(|g| g.opacity() >= cfg.prune_opacity).collect();
            if keep.iter().any(|k| !k) && keep.iter().any(|k| *k) {
                adam.retain_blocks(PARAMS, &keep);
                let mut i = 0;
                scene.gaussians.retain(|_| {
                    i += 1;
                    keep[i - 1]
                });
            }
        }
        if cfg.stage == Stage::Specular && cfg.radiance_jitter && cfg.jitter_every > 0 && done % cfg.jitter_every == 0 {
            for g in scene.gaussians.iter_mut().filter(|g| g.alpha() > 0.5) {
                for c in 0..3 {
                    g.raw[SH + c] += jitter.sample(&mut rng) as f32;
                }
            }
        }

        let psnr_val = match data.holdout {
            Some(h) if cfg.psnr_every > 0 && (done % cfg.psnr_every == 0 || done == cfg.iterations) => {
                let light = if needs_light {
                    Some(LightContext::new(&scene.light, cfg.env_levels, cfg.prefilter_samples)?)
                } else {
                    None
                };
                let f = engine.forward(&scene.gaussians, light.as_ref(), scene.visibility.as_ref(), &h.camera)?;
                Some(psnr(&clamp01(&f.image), &h.image)?)
            }
            _ => None,
        };
        report.rows.push(LossRow {
            iteration: done,
            total: l1 * ev.rgb + l2 * alpha_loss + l3 * light_loss,
            rgb: ev.rgb,
            alpha: alpha_loss,
            light: light_loss,
            psnr: psnr_val,
        });
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            checkpoint(scene, done)?;
        }
    }
    scene.completed = Some(cfg.stage);
    Ok(report)
}
