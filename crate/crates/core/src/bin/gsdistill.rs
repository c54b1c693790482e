//! Command-line driver. Every flag can also be set through an environment
//! variable named `GSDISTILL_<FLAG>` (for example `GSDISTILL_THREADS=4`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gsdistill::config::{load_config, PipelineConfig};
use gsdistill::dataset::{load_dataset, read_points, Dataset};
use gsdistill::eval::{
    clamp01, compute_env_alignment, edit_material, normal_mae, normal_map, psnr, relight, render_view, ssim,
    write_metrics_csv, MaterialEdit, MetricRow, RenderSettings, ScaleAlignment,
};
use gsdistill::gradcheck::{run_gradcheck, GradcheckConfig};
use gsdistill::io::{load_cubemap_pfm, read_pfm, write_png, Image};
use gsdistill::math::Vec3;
use gsdistill::oracle::{make_oracle, write_oracle, OracleConfig, Preset};
use gsdistill::pipeline::bake;
use gsdistill::scene::{init_scene, DomainSphere, Scene};
use gsdistill::splat::F_ALPHA;
use gsdistill::train::{run_stage_with, Stage, StageConfig, TrainSet};
use gsdistill::Error;

#[derive(Parser, Debug)]
#[command(name = "gsdistill", version, about = "Progressive radiance distillation for Gaussian splatting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration file.
    #[arg(long, global = true, env = "GSDISTILL_CONFIG")]
    config: Option<PathBuf>,
    /// Scene checkpoint (default: <out>/scene.prds).
    #[arg(long, global = true, env = "GSDISTILL_SCENE")]
    scene: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "GSDISTILL_OUT", default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true, env = "GSDISTILL_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GSDISTILL_THREADS")]
    threads: Option<usize>,
    /// Iteration count for the stage being run.
    #[arg(long, global = true, env = "GSDISTILL_ITERS")]
    iters: Option<usize>,
    /// Train without masks even when the dataset has them.
    #[arg(long, global = true, env = "GSDISTILL_MASKLESS")]
    maskless: bool,
    /// Object bounds for maskless training, as cx,cy,cz,r.
    #[arg(long, global = true, env = "GSDISTILL_DOMAIN_SPHERE", value_parser = parse_sphere)]
    domain_sphere: Option<DomainSphere>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a ground-truth dataset from a hand-authored scene.
    MakeOracle {
        #[arg(long, default_value = "mirror-sphere")]
        preset: Preset,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        views: usize,
        #[arg(long, default_value_t = 500)]
        points: usize,
    },
    /// Stage 1: fit the radiance field.
    Pretrain(StageArgs),
    /// Stage 2: distill into the specular model.
    DistillSpecular(StageArgs),
    /// Bake the visibility grid used by the diffuse term.
    BakeVisibility,
    /// Stage 3: distill into the full model.
    DistillDiffuse(StageArgs),
    /// Stage 4: refine all parameters.
    Refine(StageArgs),
    /// Render the views of a manifest with the scene's own light.
    Render(DataArgs),
    /// Render under a new environment light.
    Relight {
        #[command(flatten)]
        data: DataArgs,
        /// Cubemap directory of the new light (linear radiance).
        #[arg(long)]
        env: PathBuf,
        /// Light to align against channel-wise before relighting; defaults to
        /// the manifest's ground-truth light when it has one.
        #[arg(long)]
        align_to: Option<PathBuf>,
    },
    /// Edit materials and write the edited scene.
    EditMaterial {
        /// Replace roughness r with 1 - r.
        #[arg(long)]
        flip_roughness: bool,
        /// Set every albedo to r,g,b.
        #[arg(long, value_parser = parse_rgb)]
        albedo: Option<[f64; 3]>,
    },
    /// Per-view PSNR, SSIM and normal error against a manifest.
    Metrics(DataArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 30)]
        probes: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct StageArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Save a resumable checkpoint every this many iterations.
    #[arg(long, default_value_t = 200, env = "GSDISTILL_CHECKPOINT_EVERY")]
    checkpoint_every: usize,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset manifest.
    #[arg(long, env = "GSDISTILL_DATA")]
    data: PathBuf,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected {N} comma-separated numbers"))
}

fn parse_sphere(s: &str) -> Result<DomainSphere, String> {
    let [x, y, z, r] = parse_floats::<4>(s)?;
    if !(r > 0.0) {
        return Err("radius must be positive".into());
    }
    Ok(DomainSphere {
        center: Vec3::new(x, y, z),
        radius: r,
    })
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let c = parse_floats::<3>(s)?;
    if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("albedo values must lie in [0, 1]".into());
    }
    Ok(c)
}

impl Common {
    fn scene_path(&self) -> PathBuf {
        self.scene.clone().unwrap_or_else(|| self.out.join("scene.prds"))
    }

    fn pipeline(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_all("seed", &s.to_string())?;
        }
        Ok(cfg)
    }

    fn load_scene(&self) -> anyhow::Result<Scene> {
        let p = self.scene_path();
        if !p.exists() {
            bail!(Error::State(format!(
                "no scene at {}; run 'pretrain' first",
                p.display()
            )));
        }
        Ok(Scene::load(&p)?)
    }
}

fn progress_path(scene: &Path) -> PathBuf {
    let mut s = scene.as_os_str().to_owned();
    s.push(".progress");
    PathBuf::from(s)
}

/// Stage and iteration of an interrupted run, if any.
fn read_progress(scene: &Path) -> anyhow::Result<Option<(Stage, usize)>> {
    let p = progress_path(scene);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let mut it = text.split_whitespace();
    let (Some(name), Some(n), None) = (it.next(), it.next(), it.next()) else {
        bail!("{}: expected '<stage> <iteration>'", p.display());
    };
    let stage: Stage = name.parse()?;
    Ok(Some((stage, n.parse().with_context(|| format!("{}: bad iteration", p.display()))?)))
}

fn run_stage_command(common: &Common, stage: Stage, args: &StageArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data.data)?;
    let mut cfg = common.pipeline()?;
    let scene_path = common.scene_path();
    let mut scfg: StageConfig = cfg.stage(stage).clone();
    if let Some(n) = common.iters {
        scfg.iterations = n;
    }
    scfg.maskless |= common.maskless || ds.maskless();
    scfg.checkpoint_every = args.checkpoint_every;

    let mut scene = if scene_path.exists() {
        Scene::load(&scene_path)?
    } else if stage == Stage::Pretrain {
        let pts = ds
            .points_path()
            .ok_or_else(|| anyhow::anyhow!("the manifest names no point cloud (@points) to initialize from"))?;
        let (points, colors) = read_points(&pts)?;
        init_scene(&points, colors.as_deref(), &cfg.init)?
    } else {
        bail!(Error::State(format!(
            "no scene at {}; run '{}' first",
            scene_path.display(),
            stage.previous().unwrap_or(Stage::Pretrain).command()
        )));
    };
    if scene.completed.is_some_and(|c| c >= stage) {
        println!("{stage} already finished for {}; nothing to do", scene_path.display());
        return Ok(());
    }
    match read_progress(&scene_path)? {
        Some((s, n)) if s == stage => {
            scfg.start_iteration = n.min(scfg.iterations);
            println!("resuming {stage} at iteration {}", scfg.start_iteration);
        }
        Some((s, _)) => bail!(Error::State(format!(
            "{} holds an interrupted {s} run; finish it with '{}' first",
            scene_path.display(),
            s.command()
        ))),
        None => {}
    }
    if let Some(d) = common.domain_sphere {
        scene.domain = Some(d);
    }
    *cfg.stage_mut(stage) = scfg.clone();

    let views = ds.load_views()?;
    let views: Vec<_> = if common.maskless {
        views.into_iter().map(|v| gsdistill::train::TrainView { mask: None, ..v }).collect()
    } else {
        views
    };
    if views.len() < 2 {
        bail!(Error::InvalidInput(format!("training needs at least 2 views, the manifest has {}", views.len())));
    }
    let data = TrainSet {
        views: &views,
        background: ds.background,
        holdout: None,
    };
    let progress = progress_path(&scene_path);
    let mut checkpoint = |s: &Scene, done: usize| -> gsdistill::Result<()> {
        s.save(&scene_path)?;
        std::fs::write(&progress, format!("{} {done}\n", stage.name())).map_err(|e| Error::Io {
            path: progress.clone(),
            source: e,
        })
    };
    let report = run_stage_with(&mut scene, data, &scfg, &mut checkpoint)?;
    scene.save(&scene_path)?;
    if progress.exists() {
        std::fs::remove_file(&progress).with_context(|| format!("removing {}", progress.display()))?;
    }
    let log = common.out.join(format!("{}_loss.csv", stage.name()));
    report.write_csv(&log)?;
    if let Some(last) = report.rows.last() {
        println!(
            "{stage}: {} iterations, final loss {:.5}; scene {} log {}",
            last.iteration,
            last.total,
            scene_path.display(),
            log.display()
        );
    }
    Ok(())
}

fn view_mask(v: &gsdistill::train::TrainView) -> Vec<bool> {
    match &v.mask {
        Some(m) => m.data.iter().map(|x| *x > 0.5).collect(),
        None => vec![true; v.camera.width * v.camera.height],
    }
}

fn alpha_image(gb: &gsdistill::splat::GBuffer) -> Image {
    let mut im = Image::new(gb.width, gb.height, 3);
    for p in 0..gb.width * gb.height {
        let a = gb.field(p, F_ALPHA) as f32;
        im.data[3 * p..3 * p + 3].fill(a);
    }
    im
}

fn names(ds: &Dataset) -> Vec<String> {
    ds.views.iter().map(|v| v.name.clone()).collect()
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let settings = RenderSettings::default();
    match &cli.command {
        Command::MakeOracle {
            preset,
            size,
            views,
            points,
        } => {
            let mut cfg = OracleConfig {
                size: *size,
                views: *views,
                points: *points,
                ..OracleConfig::default()
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let ds = make_oracle(*preset, &cfg)?;
            create_out(&common.out)?;
            write_oracle(&common.out, &ds)?;
            println!(
                "{preset}: {} training and {} test views written to {}",
                ds.train.len(),
                ds.test.len(),
                common.out.display()
            );
        }
        Command::Pretrain(a) => run_stage_command(common, Stage::Pretrain, a)?,
        Command::DistillSpecular(a) => run_stage_command(common, Stage::Specular, a)?,
        Command::DistillDiffuse(a) => run_stage_command(common, Stage::Diffuse, a)?,
        Command::Refine(a) => run_stage_command(common, Stage::Refine, a)?,
        Command::BakeVisibility => {
            let cfg = common.pipeline()?;
            let mut scene = common.load_scene()?;
            bake(&mut scene, &cfg)?;
            scene.save(&common.scene_path())?;
            println!("baked a {:?} grid into {}", cfg.vis_dims, common.scene_path().display());
        }
        Command::Render(d) => {
            let scene = common.load_scene()?;
            let ds = load_dataset(&d.data)?;
            create_out(&common.out)?;
            for (name, v) in names(&ds).iter().zip(&ds.views) {
                let (gb, frame) = render_view(&scene, &v.camera, &settings)?;
                write_png(&common.out.join(format!("{name}.png")), &clamp01(&frame.image))?;
                write_png(&common.out.join(format!("{name}_alpha.png")), &alpha_image(&gb))?;
            }
            println!("rendered {} views to {}", ds.views.len(), common.out.display());
        }
        Command::Relight { data, env, align_to } => {
            let scene = common.load_scene()?;
            let ds = load_dataset(&data.data)?;
            let new_env = load_cubemap_pfm(env)?.resample(scene.light.res);
            let reference = align_to.clone().or_else(|| ds.env_path());
            let align = match reference {
                Some(p) => compute_env_alignment(&scene.light_radiance(), &load_cubemap_pfm(&p)?)?,
                None => ScaleAlignment::identity(),
            };
            create_out(&common.out)?;
            for (name, v) in names(&ds).iter().zip(&ds.views) {
                let frame = relight(&scene, &new_env, &align, &v.camera, &settings)?;
                write_png(&common.out.join(format!("{name}_relit.png")), &clamp01(&frame.image))?;
            }
            println!(
                "relit {} views (channel scale {:.3} {:.3} {:.3}) to {}",
                ds.views.len(),
                align.scale[0],
                align.scale[1],
                align.scale[2],
                common.out.display()
            );
        }
        Command::EditMaterial { flip_roughness, albedo } => {
            let scene = common.load_scene()?;
            let set = albedo.map(|c| move |_: &Vec3| c);
            let mut edits = Vec::new();
            if *flip_roughness {
                edits.push(MaterialEdit::FlipRoughness);
            }
            if let Some(f) = &set {
                edits.push(MaterialEdit::SetAlbedo(f));
            }
            if edits.is_empty() {
                bail!(Error::InvalidInput("no edit given (use --flip-roughness or --albedo)".into()));
            }
            let edited = edit_material(&scene, &edits);
            let out = common.out.join("edited.prds");
            create_out(&common.out)?;
            edited.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Metrics(d) => {
            let scene = common.load_scene()?;
            let ds = load_dataset(&d.data)?;
            let views = ds.load_views()?;
            let mut rows = Vec::new();
            for (name, v) in names(&ds).iter().zip(&views) {
                let (gb, frame) = render_view(&scene, &v.camera, &settings)?;
                let pred = clamp01(&frame.image);
                let normals = ds.root.join("normals").join(format!("{name}.pfm"));
                let mae = if normals.exists() {
                    let gt = read_pfm(&normals)?;
                    let gt: Vec<Vec3> = gt.data.chunks_exact(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
                    let mask: Vec<bool> = view_mask(v).into_iter().zip(&gt).map(|(m, n)| m && n.norm() > 0.5).collect();
                    let est: Vec<Vec3> = normal_map(&gb).into_iter().map(|n| n.unwrap_or_else(Vec3::x)).collect();
                    mask.iter().any(|m| *m).then(|| normal_mae(&est, &gt, &mask)).transpose()?
                } else {
                    None
                };
                rows.push(MetricRow {
                    view: name.clone(),
                    psnr: psnr(&pred, &v.image)?,
                    ssim: ssim(&pred, &v.image)?,
                    mae,
                });
            }
            create_out(&common.out)?;
            let csv = common.out.join("metrics.csv");
            write_metrics_csv(&csv, &rows)?;
            let n = rows.len().max(1) as f64;
            println!(
                "mean PSNR {:.2} dB, SSIM {:.4} over {} views; {}",
                rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                rows.len(),
                csv.display()
            );
        }
        Command::Gradcheck { probes } => {
            let mut cfg = GradcheckConfig {
                probes: *probes,
                ..GradcheckConfig::default()
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let rep = run_gradcheck(&cfg)?;
            for p in rep.probes.iter().filter(|p| !p.pass) {
                println!(
                    "FAIL {} pixel {:?}: analytic {:.6e} numeric {:.6e} rel {:.2e}",
                    p.target, p.pixel, p.analytic, p.numeric, p.rel_err
                );
            }
            println!(
                "gradcheck: {}/{} probes pass, max relative error {:.2e} (tolerance {:.0e})",
                rep.probes.iter().filter(|p| p.pass).count(),
                rep.probes.len(),
                rep.max_rel_err(),
                cfg.tolerance
            );
            if !rep.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
