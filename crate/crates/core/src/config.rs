//! Pipeline configuration: `key = value` lines, with `[pretrain]`,
//! `[specular]`, `[diffuse]` and `[refine]` sections.
//!
//! Keys before the first section apply to every stage; keys inside a section
//! override them for that stage. Scene-level keys (`light_res`,
//! `init_flatten`, `vis_grid`, `vis_face_res`) are only valid at the top.
//!
//! ```text
//! seed = 3
//! light_res = 32
//! [pretrain]
//! iterations = 1500
//! lr.position = 1.6e-4
//! [refine]
//! freeze = position, light
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::InitConfig;
use crate::splat::ShDir;
use crate::train::{ParamGroup, Stage, StageConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stages: [StageConfig; 4],
    pub init: InitConfig,
    pub vis_dims: [usize; 3],
    pub vis_face_res: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.map(StageConfig::new),
            init: InitConfig::default(),
            vis_dims: [16; 3],
            vis_face_res: 16,
        }
    }
}

impl PipelineConfig {
    pub fn stage(&self, s: Stage) -> &StageConfig {
        &self.stages[s.index()]
    }

    pub fn stage_mut(&mut self, s: Stage) -> &mut StageConfig {
        &mut self.stages[s.index()]
    }

    /// Applies one setting to every stage.
    pub fn set_all(&mut self, key: &str, value: &str) -> Result<()> {
        for s in self.stages.iter_mut() {
            apply_stage_key(s, key, value)?;
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_rate(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::invalid(format!("{key}: rate must be finite and >= 0, got {v}")));
    }
    Ok(v)
}

fn apply_stage_key(cfg: &mut StageConfig, key: &str, value: &str) -> Result<()> {
    if let Some(group) = key.strip_prefix("lr.") {
        if group == "position_final" {
            cfg.lr.position_final = parse_rate(key, value)?;
        } else {
            cfg.lr.set(group.parse::<ParamGroup>()?, parse_rate(key, value)?);
        }
        return Ok(());
    }
    match key {
        "iterations" => cfg.iterations = parse(key, value)?,
        "lambda_rgb" => cfg.lambda[0] = parse(key, value)?,
        "lambda_alpha" => cfg.lambda[1] = parse(key, value)?,
        "lambda_light" => cfg.lambda[2] = parse(key, value)?,
        "freeze" => {
            cfg.frozen = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<_>>()?;
        }
        "train_position" => {
            if parse_bool(key, value)? {
                cfg.frozen.remove(&ParamGroup::Position);
            } else {
                cfg.frozen.insert(ParamGroup::Position);
            }
        }
        "real_scene" => cfg.real_scene = parse_bool(key, value)?,
        "maskless" => cfg.maskless = parse_bool(key, value)?,
        "alpha_object_only" => cfg.alpha_object_only = parse_bool(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "prune_every" => cfg.prune_every = parse(key, value)?,
        "prune_opacity" => cfg.prune_opacity = parse(key, value)?,
        "psnr_every" => cfg.psnr_every = parse(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
        "env_levels" => cfg.env_levels = parse(key, value)?,
        "prefilter_samples" => cfg.prefilter_samples = parse(key, value)?,
        "sh_dir" => {
            cfg.sh_dir = match value {
                "pixel" => ShDir::PixelRay,
                "center" => ShDir::GaussianCenter,
                _ => return Err(Error::invalid(format!("sh_dir: expected pixel or center, got '{value}'"))),
            }
        }
        "alpha_init" => {
            let a: f64 = parse(key, value)?;
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(format!("alpha_init must lie in (0, 1), got {a}")));
            }
            cfg.alpha_init = a;
        }
        "warmup" => cfg.warmup = parse(key, value)?,
        "warmup_roughness" => cfg.warmup_roughness = parse(key, value)?,
        "radiance_jitter" => cfg.radiance_jitter = parse_bool(key, value)?,
        "jitter_every" => cfg.jitter_every = parse(key, value)?,
        "jitter_sigma" => cfg.jitter_sigma = parse(key, value)?,
        _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
    }
    Ok(())
}

fn apply_scene_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "light_res" => cfg.init.light_res = parse(key, value)?,
        "light_init" => cfg.init.light_value = parse(key, value)?,
        "init_opacity" => cfg.init.opacity = parse(key, value)?,
        "init_flatten" => cfg.init.flatten = parse_bool(key, value)?,
        "vis_face_res" => cfg.vis_face_res = parse(key, value)?,
        "vis_grid" => {
            let n: usize = parse(key, value)?;
            cfg.vis_dims = [n; 3];
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses config text on top of the defaults.
pub fn parse_config(text: &str, path: &Path) -> Result<PipelineConfig> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut cfg = PipelineConfig::default();
    let mut global: Vec<(usize, String, String)> = Vec::new();
    let mut local: Vec<(usize, Stage, String, String)> = Vec::new();
    let mut section: Option<Stage> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = Some(name.trim().parse().map_err(|e: Error| err(line, e.to_string()))?);
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected 'key = value', got '{body}'")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match section {
            None => global.push((line, k, v)),
            Some(s) => local.push((line, s, k, v)),
        }
    }
    for (line, k, v) in global {
        let scene_key = apply_scene_key(&mut cfg, &k, &v).map_err(|e| err(line, e.to_string()))?;
        if !scene_key {
            cfg.set_all(&k, &v).map_err(|e| err(line, e.to_string()))?;
        }
    }
    for (line, s, k, v) in local {
        let mut probe = cfg.clone();
        if apply_scene_key(&mut probe, &k, &v).unwrap_or(true) {
            return Err(err(line, format!("'{k}' is a scene-level key and must precede all sections")));
        }
        apply_stage_key(cfg.stage_mut(s), &k, &v).map_err(|e| err(line, e.to_string()))?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
