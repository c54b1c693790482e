//! Stage sequencing shared by the CLI and the test suite, plus scoring of a
//! trained scene against an oracle dataset.

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{
    clamp01, compute_env_alignment, compute_image_alignment, normal_mae, normal_map, psnr, relight, render_view,
    RenderSettings,
};
use crate::io::Image;
use crate::math::Vec3;
use crate::oracle::OracleDataset;
use crate::scene::{init_scene, Scene};
use crate::splat::{rasterize, RasterOptions, F_ALBEDO, F_ALPHA};
use crate::train::{run_stage, LossReport, Stage, TrainSet};
use crate::visibility::bake_visibility;

/// Bakes the visibility grid of `scene` with the configured resolution.
pub fn bake(scene: &mut Scene, cfg: &PipelineConfig) -> Result<()> {
    if scene.completed.is_none_or(|c| c < Stage::Specular) {
        return Err(Error::State(format!(
            "visibility is baked after {}; run '{}' first",
            Stage::Specular,
            Stage::Specular.command()
        )));
    }
    scene.visibility = Some(bake_visibility(&scene.gaussians, cfg.vis_dims, cfg.vis_face_res)?);
    Ok(())
}

/// Runs `stages` in order, baking visibility before the diffuse stage when
/// the scene has none. `after` sees each finished stage.
pub fn run_stages(
    scene: &mut Scene,
    data: TrainSet<'_>,
    cfg: &PipelineConfig,
    stages: &[Stage],
    after: &mut dyn FnMut(Stage, &Scene, &LossReport),
) -> Result<Vec<LossReport>> {
    let mut reports = Vec::with_capacity(stages.len());
    for &s in stages {
        if s == Stage::Diffuse && scene.visibility.is_none() {
            bake(scene, cfg)?;
        }
        let rep = run_stage(scene, data, cfg.stage(s))?;
        after(s, scene, &rep);
        reports.push(rep);
    }
    Ok(reports)
}

/// Initializes from the oracle point cloud and trains all four stages.
pub fn train_oracle(ds: &OracleDataset, cfg: &PipelineConfig, with_mask: bool) -> Result<Scene> {
    let views = ds.train_views(with_mask);
    let data = TrainSet {
        views: &views,
        background: ds.config.background,
        holdout: None,
    };
    let mut scene = init_scene(&ds.points, None, &cfg.init)?;
    run_stages(&mut scene, data, cfg, &Stage::ALL, &mut |_, _, _| {})?;
    Ok(scene)
}

/// Scores of a trained scene on the oracle's test views.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScores {
    /// Mean alpha over object pixels.
    pub alpha: f64,
    /// Mean normal error in degrees over object pixels.
    pub normal_mae: f64,
    /// Mean novel-view PSNR under the training light.
    pub psnr: f64,
    /// Mean PSNR under the held-out light after env-to-env alignment.
    pub relight_psnr: f64,
    /// Largest per-channel mean absolute albedo error after per-channel
    /// scale alignment, against the sphere material.
    pub albedo_err: f64,
}

pub fn score_oracle(scene: &Scene, ds: &OracleDataset, settings: &RenderSettings) -> Result<OracleScores> {
    let n = ds.test.len();
    if n == 0 {
        return Err(Error::invalid("the oracle has no test views"));
    }
    let align = compute_env_alignment(&scene.light_radiance(), &ds.env)?;
    let cams: Vec<_> = ds.test.iter().map(|v| v.camera.clone()).collect();
    let relit_gt = ds.render_under(&ds.heldout_env, &cams)?;
    let heldout = ds.heldout_env.resample(scene.light.res);
    let (mut a_sum, mut a_n) = (0.0, 0usize);
    let (mut mae, mut ps, mut rps) = (0.0, 0.0, 0.0);
    let (mut albedo_pred, mut albedo_gt, mut albedo_mask) = (Vec::new(), Vec::new(), Vec::new());
    let gt_albedo = ds.scene.sphere.material.albedo;
    for (v, gt) in ds.test.iter().zip(&relit_gt) {
        let mask = v.frame.mask_bits();
        let (gb, frame) = render_view(scene, &v.camera, settings)?;
        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            a_sum += gb.field(p, F_ALPHA);
            a_n += 1;
        }
        let pred_n: Vec<Vec3> = normal_map(&gb).into_iter().map(|n| n.unwrap_or_else(Vec3::x)).collect();
        let gt_n: Vec<Vec3> = v.frame.normals.iter().map(|n| n.unwrap_or_else(Vec3::x)).collect();
        mae += normal_mae(&pred_n, &gt_n, &mask)?;
        ps += psnr(&clamp01(&frame.image), &v.frame.image)?;
        let relit = relight(scene, &heldout, &align, &v.camera, settings)?;
        rps += psnr(&clamp01(&relit.image), &gt.image)?;
        for p in 0..mask.len() {
            for c in 0..3 {
                albedo_pred.push(gb.field(p, F_ALBEDO + c) as f32);
                albedo_gt.push(gt_albedo[c] as f32);
            }
        }
        albedo_mask.extend(mask);
    }
    if a_n == 0 {
        return Err(Error::invalid("no object pixels in the test views"));
    }
    let len = albedo_mask.len();
    let pred = Image {
        width: len,
        height: 1,
        channels: 3,
        data: albedo_pred,
    };
    let gt = Image {
        data: albedo_gt,
        ..pred.clone()
    };
    let s = compute_image_alignment(&pred, &gt, &albedo_mask)?;
    let mut err = [0.0f64; 3];
    for (p, _) in albedo_mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..3 {
            err[c] += (pred.data[3 * p + c] as f64 / s.scale[c] - gt.data[3 * p + c] as f64).abs();
        }
    }
    Ok(OracleScores {
        alpha: a_sum / a_n as f64,
        normal_mae: mae / n as f64,
        psnr: ps / n as f64,
        relight_psnr: rps / n as f64,
        albedo_err: err.iter().map(|e| e / a_n as f64).fold(0.0, f64::max),
    })
}

/// Mean alpha over object pixels of the training views.
pub fn mean_object_alpha(scene: &Scene, ds: &OracleDataset) -> Result<f64> {
    let opts = RasterOptions {
        sh_dir: RenderSettings::default().sh_dir,
        fields: true,
    };
    let (mut s, mut n) = (0.0, 0usize);
    for v in &ds.train {
        let gb = rasterize(&scene.gaussians, &v.camera, &opts);
        for (p, m) in v.frame.mask_bits().into_iter().enumerate() {
            if m {
                s += gb.field(p, F_ALPHA);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("no object pixels in the training views"));
    }
    Ok(s / n as f64)
}
