//! One function per subcommand. Each writes its artifacts plus a run
//! manifest into the output directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use glam::DVec3;
use relight_bake::cnn::CnnConfig;
use relight_bake::distill::{
    build_pseudo_dataset, evaluate_hash, hash_optimizer, loss_csv, sample_hash_batch, train_cnn, train_hash, CnnTrainConfig,
    HashEval, HashTrainConfig, LossRow, PseudoConfig, PseudoDataset, SurfacePool,
};
use relight_bake::hash::HashConfig;
use relight_bake::{DirectRenderer, HashRenderer};
use relight_core::envlight::procedural_sky;
use relight_core::geom::{mix_key, Purpose, RngStream};
use relight_core::image::Image;
use relight_core::integrator::albedo_rescale;
use relight_core::metrics::{bench_render, linear_fit, psnr, ssim, LatencyBreakdown};
use relight_core::scene::{Camera, PoseSampler, SdfScene};
use relight_nn::checkpoint::Checkpoint;
use relight_nn::optim::Adam;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::render::{load_env, render_view, view_camera, write_rendered, Baked, RENDER_FILES};
use crate::settings::Profile;
use crate::{Error, Provider, Result, Settings};

pub const TEST_POSES: &str = "test_poses.json";
pub const CNN_CKPT: &str = "cnn.ckpt";
pub const HASH_CKPT: &str = "hash.ckpt";
pub const CNN_LOSS: &str = "cnn_loss.csv";
pub const HASH_LOSS: &str = "hash_loss.csv";

fn load_scene(s: &Settings) -> Result<SdfScene> {
    Ok(SdfScene::load(Settings::require(&s.scene, "scene")?)?)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(p, e))
}

/// Camera fields as stored in `test_poses.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    fn of(c: &Camera) -> CameraRecord {
        CameraRecord {
            position: c.position.to_array(),
            look_at: c.look_at.to_array(),
            up: c.up.to_array(),
            vfov_deg: c.vfov_deg,
            width: c.width,
            height: c.height,
        }
    }

    fn camera(&self) -> Result<Camera> {
        Ok(Camera::new(
            DVec3::from_array(self.position),
            DVec3::from_array(self.look_at),
            DVec3::from_array(self.up),
            self.vfov_deg,
            self.width,
            self.height,
        )?)
    }
}

/// Training poses: an evenly spaced ring, alternating between two
/// elevations inside the scene's range.
pub fn train_cameras(scene: &SdfScene, s: &Settings) -> Result<Vec<Camera>> {
    let sampler = PoseSampler::for_scene(scene, s.width, s.height);
    let (lo, hi) = scene.elevation_deg;
    (0..s.train_poses)
        .map(|i| {
            let el = lo + (hi - lo) * if i % 2 == 0 { 0.35 } else { 0.65 };
            sampler.camera_at(2.0 * PI * i as f64 / s.train_poses as f64, el.to_radians())
        })
        .collect::<relight_core::Result<_>>()
        .map_err(Into::into)
}

/// Held-out poses drawn from the seed, kept `min_angle_deg` away from the
/// training ring.
pub fn test_cameras(scene: &SdfScene, s: &Settings, train: &[Camera]) -> Result<Vec<Camera>> {
    let sampler = PoseSampler::for_scene(scene, s.width, s.height);
    let mut rng = RngStream::new(s.seed, mix_key(&[Purpose::Pose as u64, 0x7e57]));
    let mut out: Vec<Camera> = Vec::new();
    for _ in 0..s.test_poses {
        out.push(sampler.sample(&mut rng, train, s.min_angle_deg.to_radians())?);
    }
    Ok(out)
}

pub fn read_test_cameras(data: &Path) -> Result<Vec<Camera>> {
    let p = data.join(TEST_POSES);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let recs: Vec<CameraRecord> = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    recs.iter().map(CameraRecord::camera).collect()
}

pub fn cmd_pseudo(s: &Settings) -> Result<RunManifest> {
    let scene = load_scene(s)?;
    let out = s.out_dir()?;
    let train = train_cameras(&scene, s)?;
    let test = test_cameras(&scene, s, &train)?;
    let cfg = PseudoConfig {
        n_random: s.n_random,
        width: s.width,
        height: s.height,
        min_angle_deg: s.min_angle_deg,
        seed: s.seed,
    };
    let data = build_pseudo_dataset(&scene, &cfg, &train, &test)?;
    data.write_dir(out)?;
    let recs: Vec<CameraRecord> = test.iter().map(CameraRecord::of).collect();
    write_text(out, TEST_POSES, &serde_json::to_string_pretty(&recs).expect("serializable"))?;
    let mut m = RunManifest::new("pseudo", s);
    m.output(out, "manifest.json")?;
    m.output(out, TEST_POSES)?;
    m.info = serde_json::json!({ "poses": data.len(), "dataset_hash": data.manifest.hash() });
    m.write(out)?;
    Ok(m)
}

fn cnn_config(p: Profile) -> CnnConfig {
    match p {
        Profile::Desk => CnnConfig::desk(),
        Profile::Full => CnnConfig::full(),
    }
}

pub fn cnn_train_config(s: &Settings) -> CnnTrainConfig {
    let base = match s.profile {
        Profile::Desk => CnnTrainConfig::desk(),
        Profile::Full => CnnTrainConfig::full(),
    };
    CnnTrainConfig {
        steps: s.steps.unwrap_or(base.steps),
        poses_per_batch: s.poses_per_batch.unwrap_or(base.poses_per_batch),
        lr0: s.lr0.unwrap_or(base.lr0),
        seed: s.seed,
    }
}

pub fn hash_train_config(s: &Settings) -> HashTrainConfig {
    let base = match s.profile {
        Profile::Desk => HashTrainConfig::desk(),
        Profile::Full => HashTrainConfig::full(),
    };
    HashTrainConfig {
        steps: s.steps.unwrap_or(base.steps),
        points_per_batch: s.points_per_batch.unwrap_or(base.points_per_batch),
        dirs_per_point: s.dirs_per_point.unwrap_or(base.dirs_per_point),
        lr0: s.lr0.unwrap_or(base.lr0),
        seed: s.seed,
        ..base
    }
}

fn loss_info(rows: &[LossRow], start: u64) -> serde_json::Value {
    serde_json::json!({
        "start_step": start,
        "rows": rows.len(),
        "first_loss": rows.first().map(|r| r.total),
        "final_loss": rows.last().map(|r| r.total),
    })
}

pub fn cmd_train_cnn(s: &Settings) -> Result<RunManifest> {
    let scene = load_scene(s)?;
    let data = PseudoDataset::read_dir(Settings::require(&s.data, "data")?)?;
    let out = s.out_dir()?;
    let tc = cnn_train_config(s);
    let (mut model, mut adam) = match &s.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let model = DirectRenderer::<f32>::from_checkpoint(&ck)?.0;
            let adam = ck
                .adam("adam")
                .ok_or_else(|| Error::Config(format!("{} has no optimizer state", p.display())))?;
            (model, adam)
        }
        None => (
            DirectRenderer::new(cnn_config(s.profile), DirectRenderer::<f32>::coord_box_for(&scene.aabb), s.seed),
            Adam::new(tc.lr0, 0.0),
        ),
    };
    let start = adam.step;
    let rows = train_cnn(&mut model, &mut adam, &data, &tc)?;
    let mut ck = model.checkpoint(serde_json::json!({ "seed": s.seed, "steps": adam.step }));
    ck.add_adam("adam", &adam);
    ck.write(out.join(CNN_CKPT))?;
    write_text(out, CNN_LOSS, &loss_csv(&rows))?;
    let mut m = RunManifest::new("train-cnn", s);
    m.output(out, CNN_CKPT)?;
    m.output(out, CNN_LOSS)?;
    m.info = loss_info(&rows, start);
    m.write(out)?;
    Ok(m)
}

/// Held-out agreement on surface points seen from the test poses.
pub fn held_out_eval(scene: &SdfScene, r: &HashRenderer<f32>, test: &[Camera], seed: u64) -> Result<HashEval> {
    let cfg = PseudoConfig {
        n_random: 0,
        ..PseudoConfig::default()
    };
    let held = build_pseudo_dataset(scene, &cfg, test, &[])?;
    let pool = SurfacePool::from_dataset(scene, &held);
    let ecfg = HashTrainConfig {
        points_per_batch: 2048,
        dirs_per_point: 64,
        seed: seed ^ 0x5eed_e7a1,
        ..HashTrainConfig::desk()
    };
    let batch = sample_hash_batch(scene, &pool, &ecfg, r.cfg.near, r.cfg.far, 0);
    Ok(evaluate_hash(r, &batch)?)
}

pub fn cmd_train_hash(s: &Settings) -> Result<RunManifest> {
    let scene = load_scene(s)?;
    let data_dir = Settings::require(&s.data, "data")?;
    let data = PseudoDataset::read_dir(data_dir)?;
    let out = s.out_dir()?;
    let tc = hash_train_config(s);
    tc.validate()?;
    let (mut r, resumed) = match &s.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let adam = ck
                .adam("adam")
                .ok_or_else(|| Error::Config(format!("{} has no optimizer state", p.display())))?;
            (HashRenderer::<f32>::from_checkpoint(&ck)?.0, Some(adam))
        }
        None => {
            let cfg = match s.profile {
                Profile::Desk => HashConfig::desk(),
                Profile::Full => HashConfig::full(),
            };
            (HashRenderer::new(cfg, HashRenderer::<f32>::bounds_for(&scene.aabb), s.seed), None)
        }
    };
    // Sets the decay groups; a resumed optimizer then replaces the fresh one.
    let mut adam = hash_optimizer(&tc, &mut r);
    if let Some(a) = resumed {
        adam = a;
    }
    let start = adam.step;
    let pool = SurfacePool::from_dataset(&scene, &data);
    let rows = train_hash(&mut r, &mut adam, &scene, &pool, &tc)?;
    let mut ck = r.checkpoint(serde_json::json!({ "seed": s.seed, "steps": adam.step }));
    ck.add_adam("adam", &adam);
    ck.write(out.join(HASH_CKPT))?;
    write_text(out, HASH_LOSS, &loss_csv(&rows))?;
    let mut m = RunManifest::new("train-hash", s);
    m.output(out, HASH_CKPT)?;
    m.output(out, HASH_LOSS)?;
    let mut info = loss_info(&rows, start);
    let test = read_test_cameras(data_dir)?;
    if !test.is_empty() {
        info["held_out"] = serde_json::to_value(held_out_eval(&scene, &r, &test, s.seed)?).expect("serializable");
    }
    m.info = info;
    m.write(out)?;
    Ok(m)
}

pub fn cmd_render(s: &Settings) -> Result<RunManifest> {
    let scene = load_scene(s)?;
    let env = load_env(Settings::require(&s.env, "env")?)?;
    let baked = Baked::from_settings(s)?;
    let out = s.out_dir()?;
    let camera = view_camera(&scene, s)?;
    let r = render_view(&scene, &env, baked.as_ref(), &camera, s)?;
    write_rendered(out, &r)?;
    let mut m = RunManifest::new("render", s);
    for f in RENDER_FILES {
        m.output(out, f)?;
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let c = r.frame.counts;
    m.info = serde_json::json!({
        "width": r.frame.width,
        "height": r.frame.height,
        "model_op_ms": ms(r.frame.times.model_op),
        "vis_ms": ms(r.frame.times.vis),
        "render_ms": ms(r.frame.times.render),
        "dnsr_ms": ms(r.dnsr),
        "primary_points": c.primary_points,
        "vis_queries": c.vis_queries,
        "secondary_queries": c.secondary_queries,
        "non_finite": c.non_finite,
    });
    m.write(out)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Per-channel scale applied to `a` before comparison.
    pub albedo_scale: Option<[f64; 3]>,
    pub lpips: &'static str,
}

pub fn evaluate_images(a: &Image, b: &Image, mask: Option<&Image>, calibrate: bool) -> Result<EvalReport> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Config(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut pa = a.to_rgb();
    let pb = b.to_rgb();
    let mut scale = None;
    if calibrate {
        let m = match mask {
            Some(m) => m.to_gray(),
            None => vec![1.0; pa.len()],
        };
        let (sc, rescaled) = albedo_rescale(&pa, &pb, &m)?;
        pa = rescaled;
        scale = Some(sc.to_array());
    }
    Ok(EvalReport {
        psnr: psnr(&pa, &pb, 1.0)?,
        ssim: ssim(&pa, &pb, a.width, a.height)?,
        albedo_scale: scale,
        lpips: "n/a",
    })
}

pub fn cmd_eval(s: &Settings, a: &Path, b: &Path, mask: Option<&PathBuf>) -> Result<EvalReport> {
    let ia = Image::read_pfm(a)?;
    let ib = Image::read_pfm(b)?;
    let im = mask.map(Image::read_pfm).transpose()?;
    let report = evaluate_images(&ia, &ib, im.as_ref(), s.calibrate_albedo)?;
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    println!("{text}");
    if s.out.is_some() {
        let out = s.out_dir()?;
        write_text(out, "eval.json", &text)?;
        let mut m = RunManifest::new("eval", s);
        m.output(out, "eval.json")?;
        m.info = serde_json::json!({ "a": a, "b": b, "mask": mask });
        m.write(out)?;
    }
    Ok(report)
}

/// One benchmarked configuration.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub label: String,
    pub spp: usize,
    pub breakdown: LatencyBreakdown,
}

pub fn cmd_bench(s: &Settings) -> Result<Vec<BenchRow>> {
    let scene = load_scene(s)?;
    let env = load_env(Settings::require(&s.env, "env")?)?;
    let baked = Baked::from_settings(s)?;
    let out = s.out_dir()?;
    let camera = view_camera(&scene, s)?;
    let mut rows = Vec::new();
    for &spp in &s.bench_spp {
        let run = Settings { spp, ..s.clone() };
        let measure = |b: Option<&Baked>| bench_render(|| Ok(render_view(&scene, &env, b, &camera, &run).map_err(to_core)?.timing()), s.warmup, s.repeats);
        let teacher = measure(None)?;
        rows.push(BenchRow {
            label: format!("teacher-spp{spp}"),
            spp,
            breakdown: teacher,
        });
        if let Some(b) = &baked {
            rows.push(BenchRow {
                label: format!("baked-spp{spp}"),
                spp,
                breakdown: measure(Some(b))?.with_baseline(&teacher),
            });
        }
    }
    let hash = s.config_hash();
    let mut csv = String::from(LatencyBreakdown::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.breakdown.csv_row(&r.label, &hash));
        csv.push('\n');
    }
    write_text(out, "bench.csv", &csv)?;
    let prefix = if baked.is_some() { "baked" } else { "teacher" };
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.label.starts_with(prefix))
        .map(|r| (r.spp as f64, r.breakdown.vis_ms))
        .unzip();
    let mut m = RunManifest::new("bench", s);
    m.output(out, "bench.csv")?;
    if xs.len() >= 2 {
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        m.info = serde_json::json!({ "vis_fit": { "provider": prefix, "slope_ms_per_spp": slope, "intercept_ms": intercept, "r2": r2 } });
    }
    m.write(out)?;
    print!("{csv}");
    Ok(rows)
}

fn to_core(e: Error) -> relight_core::Error {
    match e {
        Error::Core(c) => c,
        other => relight_core::Error::ShapeMismatch(other.to_string()),
    }
}

/// A procedural sky whose sun direction and tint follow the seed.
pub fn sky_for_seed(width: usize, seed: u64) -> Result<relight_core::envlight::EnvironmentMap> {
    let mut rng = RngStream::new(seed, mix_key(&[Purpose::Init as u64, 0xe4]));
    let az = 2.0 * PI * rng.next_f64();
    let el = (20.0 + 40.0 * rng.next_f64()).to_radians();
    let sun = DVec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
    let warm = rng.next_f64();
    Ok(procedural_sky(
        width,
        sun,
        DVec3::new(6.0, 5.0 + warm, 4.0 + 1.5 * warm),
        20.0 + 30.0 * rng.next_f64(),
        DVec3::new(0.25, 0.4, 0.8),
        DVec3::new(0.8, 0.8, 0.75),
        DVec3::new(0.15, 0.12, 0.1),
    )?)
}

pub fn cmd_gen_env(s: &Settings) -> Result<RunManifest> {
    let out = s.out_dir()?;
    let map = sky_for_seed(s.width, s.seed)?;
    let img = map.to_image();
    img.write_pfm(out.join("env.pfm"))?;
    crate::render::write_png(&out.join("env.png"), img.width, img.height, &img.to_rgb())?;
    let mut m = RunManifest::new("gen-env", s);
    m.output(out, "env.pfm")?;
    m.output(out, "env.png")?;
    m.write(out)?;
    Ok(m)
}

/// Providers other than the teacher need both checkpoints.
pub fn check_provider(s: &Settings) -> Result<()> {
    if s.provider == Provider::Baked && (s.cnn.is_none() || s.hash.is_none()) {
        return Err(Error::Config("--provider baked needs --cnn and --hash".into()));
    }
    Ok(())
}
