use std::path::Path;
use std::process::{Command, Output};

use gsdistill::dataset::read_points;
use gsdistill::scene::{init_scene, InitConfig, Scene};
use gsdistill::train::Stage;

fn gsdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn oracle(dir: &Path) {
    let o = gsdistill(
        dir,
        &["make-oracle", "--preset", "lambertian-sphere", "--size", "20", "--views", "3", "--points", "60", "--out", "ds"],
    );
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn make_oracle_writes_dataset_env_and_materials() {
    let tmp = tempfile::tempdir().unwrap();
    oracle(tmp.path());
    let ds = tmp.path().join("ds");
    let train = gsdistill::dataset::load_dataset(&ds.join("train.txt")).unwrap();
    assert_eq!(train.views.len(), 3);
    assert!(!train.maskless());
    assert!(train.env_path().unwrap().join("cubemap.txt").exists());
    assert!(ds.join("env_heldout").is_dir());
    let mat = std::fs::read_to_string(ds.join("material.txt")).unwrap();
    assert!(mat.contains("sphere.roughness = 0.99") && mat.contains("sphere.metallic = 0"), "{mat}");
    assert_eq!(read_points(&ds.join("points.txt")).unwrap().0.len(), 60);
}

#[test]
fn stages_run_in_order_and_name_missing_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    oracle(d);
    let stage = |cmd: &str| gsdistill(d, &[cmd, "--data", "ds/train.txt", "--out", "run", "--iters", "4"]);

    let o = stage("distill-specular");
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("'pretrain'"), "{}", text(&o));

    assert!(stage("pretrain").status.success());
    assert!(stage("distill-specular").status.success());
    let o = stage("distill-diffuse");
    assert!(!o.status.success());
    assert!(text(&o).contains("'bake-visibility'"), "{}", text(&o));

    let o = gsdistill(d, &["bake-visibility", "--out", "run"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(stage("distill-diffuse").status.success());
    assert!(stage("refine").status.success());
    let scene = Scene::load(&d.join("run/scene.prds")).unwrap();
    assert_eq!(scene.completed, Some(Stage::Refine));
    assert!(scene.visibility.is_some());

    let o = gsdistill(d, &["render", "--data", "ds/test.txt", "--scene", "run/scene.prds", "--out", "img"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("img/test_000.png").exists() && d.join("img/test_000_alpha.png").exists());

    let o = gsdistill(d, &["metrics", "--data", "ds/test.txt", "--scene", "run/scene.prds", "--out", "m"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(d.join("m/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.lines().nth(1).unwrap().split(',').all(|f| !f.is_empty()));

    let o = gsdistill(
        d,
        &["relight", "--data", "ds/test.txt", "--scene", "run/scene.prds", "--env", "ds/env_heldout", "--out", "rl"],
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("rl/test_000_relit.png").exists());

    let o = gsdistill(d, &["edit-material", "--scene", "run/scene.prds", "--albedo", "0.2,0.4,0.6", "--out", "e"]);
    assert!(o.status.success(), "{}", text(&o));
    let edited = Scene::load(&d.join("e/edited.prds")).unwrap();
    assert!(edited.gaussians.iter().all(|g| (g.albedo()[1] - 0.4).abs() < 1e-5));
}

#[test]
fn stage_commands_resume_from_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    oracle(d);
    let (pts, _) = read_points(&d.join("ds/points.txt")).unwrap();
    let scene = init_scene(&pts, None, &InitConfig::default()).unwrap();
    scene.save(&d.join("run/scene.prds")).unwrap();
    std::fs::write(d.join("run/scene.prds.progress"), "pretrain 25\n").unwrap();

    let o = gsdistill(d, &["pretrain", "--data", "ds/train.txt", "--out", "run", "--iters", "30"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("resuming pretrain at iteration 25"), "{}", text(&o));
    let log = std::fs::read_to_string(d.join("run/pretrain_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);
    assert!(!d.join("run/scene.prds.progress").exists());

    let o = gsdistill(d, &["pretrain", "--data", "ds/train.txt", "--out", "run", "--iters", "30"]);
    assert!(o.status.success());
    assert!(text(&o).contains("already finished"), "{}", text(&o));
}

#[test]
fn environment_variables_mirror_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    oracle(d);
    let o = Command::new(env!("CARGO_BIN_EXE_gsdistill"))
        .current_dir(d)
        .args(["pretrain", "--data", "ds/train.txt", "--out", "run"])
        .env("GSDISTILL_ITERS", "12")
        .env("GSDISTILL_CHECKPOINT_EVERY", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let log = std::fs::read_to_string(d.join("run/pretrain_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
}

#[test]
fn gradcheck_exits_zero_and_bad_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gsdistill(tmp.path(), &["gradcheck", "--probes", "6"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("6/6 probes pass"), "{}", text(&o));
    let o = gsdistill(tmp.path(), &["pretrain", "--data", "x.txt", "--domain-sphere", "0,0,1"]);
    assert!(!o.status.success());
    let o = gsdistill(tmp.path(), &["pretrain", "--data", "missing.txt"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("missing.txt"), "{}", text(&o));
}
