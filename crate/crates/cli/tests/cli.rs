use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glam::DVec3;
use relight_core::image::Image;
use serde_json::Value;

fn asset(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets")
        .join(rel)
        .to_str()
        .unwrap()
        .to_string()
}

fn relight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relight"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = relight(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny dataset: 2 training poses plus 2 random ones at 16x16.
fn pseudo(dir: &Path, n_random: &str) {
    let scene = asset("scenes/spheres.scene");
    ok(&[
        "pseudo", "--scene", &scene, "--n-random", n_random, "--train-poses", "2", "--width", "16", "--height", "16", "--out",
        p(dir),
    ]);
}

#[test]
fn pseudo_with_no_random_poses_keeps_training_poses() {
    let tmp = tempfile::tempdir().unwrap();
    pseudo(tmp.path(), "0");
    assert_eq!(manifest(tmp.path())["info"]["poses"], 2);
}

#[test]
fn pseudo_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pseudo(&a, "2");
    pseudo(&b, "2");
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["info"]["dataset_hash"], mb["info"]["dataset_hash"]);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["info"]["poses"], 4);
}

#[test]
fn training_resumes_and_logs_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, first, second) = (tmp.path().join("data"), tmp.path().join("c1"), tmp.path().join("c2"));
    pseudo(&data, "2");
    let scene = asset("scenes/spheres.scene");
    let common = ["train-cnn", "--scene", &scene, "--data", p(&data), "--poses-per-batch", "2"];
    ok(&[&common[..], &["--steps", "2", "--out", p(&first)]].concat());
    let csv = std::fs::read_to_string(first.join("cnn_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let ck = first.join("cnn.ckpt");
    // --steps is the total, so resuming at step 2 runs steps 2 and 3.
    ok(&[&common[..], &["--steps", "4", "--resume", p(&ck), "--out", p(&second)]].concat());
    let m = manifest(&second);
    assert_eq!(m["info"]["start_step"], 2);
    let csv = std::fs::read_to_string(second.join("cnn_loss.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "3"]);

    let hash = tmp.path().join("h");
    ok(&["train-hash", "--scene", &scene, "--data", p(&data), "--steps", "3", "--points-per-batch", "32", "--out", p(&hash)]);
    let csv = std::fs::read_to_string(hash.join("hash_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let m = manifest(&hash);
    assert!(m["outputs"]["hash.ckpt"].as_str().unwrap().len() == 64);
}

fn render(out: &Path, extra: &[&str]) -> Value {
    let scene = asset("scenes/spheres.scene");
    let env = asset("env/sky-train.pfm");
    ok(&[
        &["render", "--scene", &scene, "--env", &env, "--width", "24", "--height", "16", "--spp", "2", "--out", p(out)][..],
        extra,
    ]
    .concat());
    manifest(out)
}

#[test]
fn denoising_changes_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = render(&tmp.path().join("a"), &[]);
    let b = render(&tmp.path().join("b"), &["--no-denoise"]);
    assert_ne!(a["outputs"]["render.pfm"], b["outputs"]["render.pfm"]);
    assert_eq!(a["outputs"]["raw.pfm"], b["outputs"]["raw.pfm"]);
    let img = Image::read_pfm(tmp.path().join("a/render.pfm")).unwrap();
    assert_eq!((img.width, img.height), (24, 16));
}

#[test]
fn baked_render_matches_teacher_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    pseudo(&data, "0");
    let scene = asset("scenes/spheres.scene");
    let (c, h) = (tmp.path().join("c"), tmp.path().join("h"));
    ok(&["train-cnn", "--scene", &scene, "--data", p(&data), "--steps", "1", "--poses-per-batch", "2", "--out", p(&c)]);
    ok(&["train-hash", "--scene", &scene, "--data", p(&data), "--steps", "1", "--points-per-batch", "16", "--out", p(&h)]);
    let (cnn, hash) = (c.join("cnn.ckpt"), h.join("hash.ckpt"));
    render(&tmp.path().join("baked"), &["--provider", "baked", "--cnn", p(&cnn), "--hash", p(&hash)]);
    render(&tmp.path().join("teacher"), &[]);
    let a = Image::read_pfm(tmp.path().join("baked/render.pfm")).unwrap();
    let b = Image::read_pfm(tmp.path().join("teacher/render.pfm")).unwrap();
    assert_eq!((a.width, a.height), (b.width, b.height));
}

fn write(path: &Path, w: usize, h: usize, f: impl Fn(usize) -> DVec3) {
    let px: Vec<DVec3> = (0..w * h).map(f).collect();
    Image::from_rgb(w, h, &px).write_pfm(path).unwrap();
}

#[test]
fn eval_reports_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c, d) = (tmp.path().join("a.pfm"), tmp.path().join("b.pfm"), tmp.path().join("c.pfm"), tmp.path().join("d.pfm"));
    let refc = |i: usize| DVec3::new(0.2 + 0.01 * (i % 7) as f64, 0.4, 0.6);
    write(&a, 16, 16, refc);
    write(&b, 16, 16, |i| refc(i) * 0.5);
    write(&c, 8, 16, refc);

    let o = ok(&["eval", p(&a), p(&a)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["psnr"], 99.0);
    assert!((v["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["lpips"], "n/a");

    let out = tmp.path().join("ev");
    let o = ok(&["eval", p(&b), p(&a), "--calibrate-albedo", "--out", p(&out)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for s in v["albedo_scale"].as_array().unwrap() {
        assert!((s.as_f64().unwrap() - 2.0).abs() < 1e-4, "{v}");
    }
    assert!(out.join("eval.json").exists());

    let o = relight(&["eval", p(&a), p(&c)]);
    assert_eq!(o.status.code(), Some(2));
    write(&d, 16, 16, |_| DVec3::ZERO);
    let o = ok(&["eval", p(&a), p(&d)]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["psnr"].as_f64().unwrap() < 20.0);
}

#[test]
fn bad_input_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("nope.scene");
    assert_eq!(relight(&["render", "--scene", p(&missing), "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(relight(&["render", "--bounces", "3"]).status.code(), Some(2));
    let scene = asset("scenes/spheres.scene");
    assert_eq!(relight(&["render", "--scene", &scene, "--provider", "baked", "--out", p(&out)]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "spp = 4\nunknown_key = 1\n").unwrap();
    assert_eq!(relight(&["render", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn config_file_and_flags_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("r.toml");
    std::fs::write(&cfg, format!("scene = {:?}\nenv = {:?}\nwidth = 12\nheight = 8\nspp = 1\n", asset("scenes/spheres.scene"), asset("env/sky-train.pfm"))).unwrap();
    let out = tmp.path().join("o");
    ok(&["render", "--config", p(&cfg), "--spp", "2", "--out", p(&out)]);
    let m = manifest(&out);
    assert_eq!(m["config"]["spp"], 2);
    assert_eq!(m["config"]["width"], 12);
    assert_eq!(m["command"], "render");
}

#[test]
fn gen_env_writes_a_sky() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e");
    ok(&["gen-env", "--seed", "4", "--width", "32", "--out", p(&out)]);
    let img = Image::read_pfm(out.join("env.pfm")).unwrap();
    assert_eq!((img.width, img.height), (32, 16));
    assert!(out.join("env.png").exists());
}
