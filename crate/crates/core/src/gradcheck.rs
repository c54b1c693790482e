//! Finite-difference check of the full per-pixel gradient pipeline:
//! splatting, radiance SH, split-sum specular, SH triple-product diffuse with
//! visibility, tone mapping, sRGB and the alpha blend, back to raw Gaussian
//! parameters and raw light texels.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brdf::default_lut;
use crate::envlight::CubeMap;
use crate::error::{Error, Result};
use crate::math::{logit, Vec3};
use crate::scene::{Gaussian, ALBEDO, ALPHA, LOG_SCALE, METAL, OPACITY, PARAMS, POS, ROT, ROUGH, SH};
use crate::shading::{Shader, ShadingModel};
use crate::sh::triple_tensor;
use crate::splat::{rasterize, Camera, RasterOptions, ShDir, F_ALPHA, NF};
use crate::train::engine::{AdjointRegistry, AlphaTerm, GradientEngine, Gradients, LightContext, Objective};
use crate::visibility::{VisibilityGrid, UNOCCLUDED};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Gradients below this magnitude on both sides count as agreeing.
    pub abs_floor: f64,
    pub size: usize,
    pub gaussians: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            probes: 30,
            seed: 1,
            tolerance: 1e-3,
            abs_floor: 1e-7,
            size: 24,
            gaussians: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTarget {
    Gaussian { index: usize, slot: usize },
    Light { index: usize },
}

impl fmt::Display for ProbeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeTarget::Gaussian { index, slot } => write!(f, "gaussian {index} slot {slot}"),
            ProbeTarget::Light { index } => write!(f, "light texel {} channel {}", index / 3, index % 3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub diffuse: bool,
    pub pixel: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub probes: Vec<ProbeResult>,
    /// Draws rejected because the two step sizes disagreed (a kink or
    /// footprint cutoff inside the stencil).
    pub rejected: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

struct Config {
    gaussians: Vec<Gaussian>,
    light: CubeMap,
    grid: VisibilityGrid,
    cam: Camera,
    model: ShadingModel,
}

fn random_config(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<Config> {
    let mut gaussians = Vec::with_capacity(cfg.gaussians);
    for _ in 0..cfg.gaussians {
        let mut g = Gaussian::default();
        g.set_position(&Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)));
        for k in 0..4 {
            g.raw[ROT + k] = rng.gen_range(-1.0..1.0);
        }
        for k in 0..3 {
            g.raw[LOG_SCALE + k] = rng.gen_range(-2.5..-1.4);
            g.raw[ALBEDO + k] = rng.gen_range(-1.5..1.5);
        }
        g.raw[OPACITY] = logit(rng.gen_range(0.3..0.9)) as f32;
        g.raw[ROUGH] = rng.gen_range(-1.5..1.5);
        g.raw[METAL] = rng.gen_range(-1.5..1.5);
        g.raw[ALPHA] = rng.gen_range(-1.5..1.5);
        for k in 0..48 {
            g.raw[SH + k] = rng.gen_range(-0.3..0.3);
        }
        gaussians.push(g);
    }
    let mut light = CubeMap::new(16, 3);
    for v in light.data.iter_mut() {
        *v = rng.gen_range(-1.5..0.3);
    }
    let mut grid = VisibilityGrid::new(Vec3::repeat(-0.8), Vec3::repeat(0.8), [3, 3, 3])?;
    for c in grid.cells.iter_mut() {
        c[0] = (UNOCCLUDED[0] * rng.gen_range(0.4..1.0)) as f32;
        for v in c.iter_mut().skip(1) {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    let eye = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 3.0);
    let cam = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), 40.0, cfg.size, cfg.size)?;
    let model = if rng.gen_bool(0.7) {
        ShadingModel::FULL
    } else {
        ShadingModel::SPECULAR_ONLY
    };
    Ok(Config {
        gaussians,
        light,
        grid,
        cam,
        model,
    })
}

const LEVELS: usize = 4;
const SAMPLES: usize = 16;

fn pixel_value(c: &Config, gaussians: &[Gaussian], light_raw: &CubeMap, px: (usize, usize, usize)) -> Result<f64> {
    let light = LightContext::new(light_raw, LEVELS, SAMPLES)?;
    let gb = rasterize(gaussians, &c.cam, &RasterOptions::default());
    let shader = Shader {
        env: &light.env,
        light_sh: &light.sh,
        grid: Some(&c.grid),
        lut: default_lut(),
        tensor: triple_tensor(),
        model: c.model,
        background: [1.0; 3],
    };
    Ok(shader.shade_pixel(&gb, &c.cam, px.0, px.1)[px.2])
}

fn central_difference(
    c: &Config,
    target: ProbeTarget,
    h: f32,
    px: (usize, usize, usize),
) -> Result<f64> {
    let mut gp = c.gaussians.clone();
    let mut gm = c.gaussians.clone();
    let mut lp = c.light.clone();
    let mut lm = c.light.clone();
    let step = match target {
        ProbeTarget::Gaussian { index, slot } => {
            gp[index].raw[slot] += h;
            gm[index].raw[slot] -= h;
            (gp[index].raw[slot] - gm[index].raw[slot]) as f64
        }
        ProbeTarget::Light { index } => {
            lp.data[index] += h;
            lm.data[index] -= h;
            (lp.data[index] - lm.data[index]) as f64
        }
    };
    Ok((pixel_value(c, &gp, &lp, px)? - pixel_value(c, &gm, &lm, px)?) / step)
}

const SHADING_SLOTS: [usize; 9] = [ALBEDO, ALBEDO + 1, ALBEDO + 2, ROUGH, METAL, ALPHA, SH, SH + 7, SH + 31];
const GEOMETRY_SLOTS: [usize; 8] = [POS, POS + 1, POS + 2, ROT, ROT + 2, LOG_SCALE, LOG_SCALE + 2, OPACITY];

/// Runs `cfg.probes` probes, each on a fresh random configuration.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    run_gradcheck_with(cfg, &AdjointRegistry::default())
}

pub fn run_gradcheck_with(cfg: &GradcheckConfig, registry: &AdjointRegistry) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();
    let mut attempts = 0;
    while report.probes.len() < cfg.probes {
        attempts += 1;
        if attempts > cfg.probes * 20 {
            return Err(Error::State(format!(
                "gradcheck could not place {} probes ({} rejected)",
                cfg.probes, report.rejected
            )));
        }
        let c = random_config(&mut rng, cfg)?;
        let obj = Objective {
            model: Some(c.model),
            lambda: [1.0, 0.0, 0.0],
            alpha: AlphaTerm::None,
            white_loss: false,
            background: [1.0; 3],
            sh_dir: ShDir::PixelRay,
            env_levels: LEVELS,
            prefilter_samples: SAMPLES,
        };
        let engine = GradientEngine::new(registry, obj)?;
        let light = LightContext::new(&c.light, LEVELS, SAMPLES)?;
        let fwd = engine.forward(&c.gaussians, Some(&light), Some(&c.grid), &c.cam)?;
        let gb = &fwd.gbuffer;
        let shaded: Vec<usize> = (0..gb.width * gb.height)
            .filter(|&p| gb.coverage(p) > 0.3 && gb.sums[p * NF + F_ALPHA] > 1e-3)
            .collect();
        if shaded.is_empty() {
            continue;
        }
        let p = shaded[rng.gen_range(0..shaded.len())];
        let px = (p % gb.width, p / gb.width, rng.gen_range(0..3));
        let mut g_img = vec![0.0; gb.width * gb.height * 3];
        g_img[3 * p + px.2] = 1.0;
        let mut grads = Gradients::zeros(c.gaussians.len(), c.light.data.len());
        engine.backward(&c.gaussians, Some(&light), Some(&c.grid), &c.cam, &fwd, &g_img, None, &mut grads)?;

        let kind = rng.gen_range(0..3);
        let (target, h) = if kind == 0 {
            // Texels are stored in f32, so only clearly contributing ones are
            // resolvable by differences; the light is smooth in its raw
            // log-radiance, which allows a wider step.
            let cand: Vec<usize> = (0..grads.light.len()).filter(|&i| grads.light[i].abs() > 1e-4).collect();
            if cand.is_empty() {
                continue;
            }
            (ProbeTarget::Light { index: cand[rng.gen_range(0..cand.len())] }, 2e-2f32)
        } else {
            let (slots, h): (&[usize], f32) = if kind == 1 { (&SHADING_SLOTS, 1e-3) } else { (&GEOMETRY_SLOTS, 1e-4) };
            let slot = slots[rng.gen_range(0..slots.len())];
            let cand: Vec<usize> = (0..c.gaussians.len()).filter(|&i| grads.gaussians[i][slot].abs() > 1e-6).collect();
            if cand.is_empty() {
                continue;
            }
            (ProbeTarget::Gaussian { index: cand[rng.gen_range(0..cand.len())], slot }, h)
        };
        let analytic = match target {
            ProbeTarget::Gaussian { index, slot } => grads.gaussians[index][slot],
            ProbeTarget::Light { index } => grads.light[index],
        };
        let n1 = central_difference(&c, target, h, px)?;
        let n2 = central_difference(&c, target, 0.5 * h, px)?;
        let scale = n1.abs().max(n2.abs()).max(cfg.abs_floor);
        if (n1 - n2).abs() / scale > 0.5 * cfg.tolerance {
            report.rejected += 1;
            continue;
        }
        // Richardson extrapolation of the two central differences.
        let numeric = (4.0 * n2 - n1) / 3.0;
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel_err = (analytic - numeric).abs() / denom;
        report.probes.push(ProbeResult {
            target,
            diffuse: c.model.diffuse,
            pixel: px,
            analytic,
            numeric,
            rel_err,
            pass: rel_err < cfg.tolerance,
        });
    }
    Ok(report)
}

/// Parameter family of a Gaussian slot, for reporting.
pub fn slot_family(slot: usize) -> &'static str {
    match slot {
        s if s < ROT => "position",
        s if s < LOG_SCALE => "rotation",
        s if s < OPACITY => "scale",
        OPACITY => "opacity",
        s if s < ROUGH => "albedo",
        ROUGH => "roughness",
        METAL => "metallic",
        ALPHA => "alpha",
        s if s < PARAMS => "sh",
        _ => "unknown",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::engine::Op;

    #[test]
    fn small_run_passes() {
        let r = run_gradcheck(&GradcheckConfig {
            probes: 8,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        for p in &r.probes {
            assert!(p.pass, "{} {:?}: {} vs {}", p.target, p.pixel, p.analytic, p.numeric);
        }
    }

    #[test]
    fn unregistered_op_is_an_error() {
        let reg = AdjointRegistry::default().without(Op::TripleProduct);
        let cfg = GradcheckConfig {
            probes: 4,
            ..Default::default()
        };
        assert!(matches!(run_gradcheck_with(&cfg, &reg), Err(Error::State(_))));
    }
}
