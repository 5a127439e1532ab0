//! Pseudo-data extraction from the teacher and the two student training
//! loops.

use glam::DVec3;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use relight_core::brdf::{BrdfParams, ROUGHNESS_MAX, ROUGHNESS_MIN};
use relight_core::geom::{mix_key, stratified_sphere_dirs, Purpose, RngStream};
use relight_core::scene::{Camera, GBuffer, PoseSampler, SdfScene};
use relight_nn::layers::sigmoid;
use relight_nn::loss::{weighted_bce_logit, weighted_l1};
use relight_nn::optim::{cosine_lr, exp_decay_lr, Adam};
use relight_nn::{Layer, Module, Real, Tensor};

use crate::cnn::{build_raymap, cnn_loss, gbuffer_targets, stack, DirectRenderer};
use crate::hash::{HashRenderer, DECODER_OUT, TRACER_OUT};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseKind {
    Train,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub kind: PoseKind,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// SHA-256 of the G-buffer planes.
    pub digest: String,
}

impl PoseRecord {
    pub fn camera(&self) -> Result<Camera> {
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: String,
    pub seed: u64,
    pub n_random: usize,
    pub min_angle_deg: f64,
    pub poses: Vec<PoseRecord>,
}

impl DatasetManifest {
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

pub struct PseudoDataset {
    pub manifest: DatasetManifest,
    pub cameras: Vec<Camera>,
    pub gbuffers: Vec<GBuffer>,
}

#[derive(Clone, Copy, Debug)]
pub struct PseudoConfig {
    pub n_random: usize,
    pub width: usize,
    pub height: usize,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            n_random: 512,
            width: 128,
            height: 128,
            min_angle_deg: 1.0,
            seed: 0,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn gbuffer_digest(gb: &GBuffer) -> String {
    let mut h = Sha256::new();
    h.update((gb.width as u64).to_le_bytes());
    h.update((gb.height as u64).to_le_bytes());
    for v in [&gb.albedo, &gb.normal, &gb.coord] {
        for p in v.iter() {
            for c in p.to_array() {
                h.update(c.to_le_bytes());
            }
        }
    }
    for v in [&gb.roughness, &gb.mask, &gb.depth] {
        for c in v.iter() {
            h.update(c.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Teacher G-buffers for the training poses followed by `n_random` poses
/// drawn on the scene's hemisphere, each at least `min_angle_deg` from every
/// training and test pose.
pub fn build_pseudo_dataset(scene: &SdfScene, cfg: &PseudoConfig, train: &[Camera], test: &[Camera]) -> Result<PseudoDataset> {
    let sampler = PoseSampler::for_scene(scene, cfg.width, cfg.height);
    let mut rng = RngStream::new(cfg.seed, Purpose::Pose as u64);
    let reject: Vec<Camera> = train.iter().chain(test).copied().collect();
    let mut cameras: Vec<(PoseKind, Camera)> = train.iter().map(|c| (PoseKind::Train, *c)).collect();
    for _ in 0..cfg.n_random {
        let c = sampler.sample(&mut rng, &reject, cfg.min_angle_deg.to_radians())?;
        cameras.push((PoseKind::Random, c));
    }
    let gbuffers: Vec<GBuffer> = cameras.iter().map(|(_, c)| scene.trace_gbuffer(c)).collect();
    let poses = cameras
        .iter()
        .zip(&gbuffers)
        .map(|((kind, c), gb)| PoseRecord {
            kind: *kind,
            position: c.position.to_array(),
            look_at: c.look_at.to_array(),
            up: c.up.to_array(),
            vfov_deg: c.vfov_deg,
            width: c.width,
            height: c.height,
            digest: gbuffer_digest(gb),
        })
        .collect();
    Ok(PseudoDataset {
        manifest: DatasetManifest {
            scene: scene.name.clone(),
            seed: cfg.seed,
            n_random: cfg.n_random,
            min_angle_deg: cfg.min_angle_deg,
            poses,
        },
        cameras: cameras.into_iter().map(|(_, c)| c).collect(),
        gbuffers,
    })
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| relight_core::Error::io(dir, e))?;
        for (i, gb) in self.gbuffers.iter().enumerate() {
            gb.write_dir(dir.join(format!("pose_{i:05}")))?;
        }
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_value(&self.manifest).expect("serializable");
        json["hash"] = self.manifest.hash().into();
        fs::write(&path, serde_json::to_string_pretty(&json).expect("serializable"))
            .map_err(|e| relight_core::Error::io(&path, e))?;
        Ok(())
    }

    /// Planes come back at PFM precision, so digests are not re-checked.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<PseudoDataset> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| relight_core::Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| relight_core::Error::parse(&path, e.to_string()))?;
        let cameras = manifest.poses.iter().map(|p| p.camera()).collect::<Result<Vec<_>>>()?;
        let gbuffers = (0..cameras.len())
            .map(|i| GBuffer::read_dir(dir.join(format!("pose_{i:05}"))))
            .collect::<relight_core::Result<Vec<_>>>()?;
        Ok(PseudoDataset {
            manifest,
            cameras,
            gbuffers,
        })
    }
}

/// One row of a loss trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step");
    if let Some(r) = rows.first() {
        for (n, _) in &r.terms {
            s.push(',');
            s.push_str(n);
        }
    }
    s.push_str(",total,lr\n");
    for r in rows {
        let _ = write!(s, "{}", r.step);
        for (_, v) in &r.terms {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{}", r.total, r.lr);
    }
    s
}

/// Mean of `values[i..i+window]` for every full window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnTrainConfig {
    pub steps: u64,
    pub poses_per_batch: usize,
    pub lr0: f64,
    pub seed: u64,
}

impl CnnTrainConfig {
    pub fn full() -> CnnTrainConfig {
        CnnTrainConfig {
            steps: 100_000,
            poses_per_batch: 64,
            lr0: 5e-4,
            seed: 0,
        }
    }

    pub fn desk() -> CnnTrainConfig {
        CnnTrainConfig {
            steps: 3000,
            ..CnnTrainConfig::full()
        }
    }
}

/// Runs from the optimizer's current step up to `cfg.steps`, so a resumed
/// optimizer continues its step counter and schedule.
pub fn train_cnn(
    model: &mut DirectRenderer<f32>,
    adam: &mut Adam<f32>,
    data: &PseudoDataset,
    cfg: &CnnTrainConfig,
) -> Result<Vec<LossRow>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    let d = model.cfg.downsample();
    let maps = data
        .cameras
        .iter()
        .map(|c| build_raymap::<f32>(c, d))
        .collect::<Result<Vec<_>>>()?;
    let targets = data
        .gbuffers
        .iter()
        .map(|g| gbuffer_targets::<f32>(&[g], model.lo, model.hi))
        .collect::<Result<Vec<_>>>()?;
    let n = data.len();
    let batch = cfg.poses_per_batch.clamp(1, n);
    let mut rows = Vec::new();
    while adam.step < cfg.steps {
        let step = adam.step;
        let idx: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            let mut rng = RngStream::new(cfg.seed, mix_key(&[Purpose::Training as u64, step]));
            let mut v = sample(rng.rng(), n, batch).into_vec();
            v.sort_unstable();
            v
        };
        let x = stack(&idx.iter().map(|&i| &maps[i]).collect::<Vec<_>>())?;
        let t = concat(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
        let raw = model.forward(&x)?;
        let (loss, g) = cnn_loss(&raw, &t)?;
        if !loss.total().is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        model.zero_grad();
        model.backward(&g)?;
        adam.lr = cosine_lr(step, cfg.steps, cfg.lr0);
        let lr = adam.lr;
        adam.step(model)?;
        rows.push(LossRow {
            step,
            terms: vec![
                ("albedo", loss.albedo),
                ("normal", loss.normal),
                ("roughness", loss.roughness),
                ("coord", loss.coord),
                ("mask", loss.mask),
            ],
            total: loss.total(),
            lr,
        });
        if step % 100 == 0 {
            log::info!("cnn step {step}: loss {:.5} lr {lr:.2e}", loss.total());
        }
    }
    Ok(rows)
}

fn concat<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let mut shape = first.shape.clone();
    shape[0] = items.iter().map(|t| t.shape[0]).sum();
    let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashTrainConfig {
    pub steps: u64,
    pub points_per_batch: usize,
    /// Perfect square so directions stratify on a grid.
    pub dirs_per_point: usize,
    pub lr0: f64,
    pub final_lr_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl HashTrainConfig {
    pub fn full() -> HashTrainConfig {
        HashTrainConfig {
            steps: 80_000,
            points_per_batch: 2048,
            dirs_per_point: 1024,
            lr0: 2e-3,
            final_lr_ratio: 0.1,
            weight_decay: 1e-6,
            seed: 0,
        }
    }

    pub fn desk() -> HashTrainConfig {
        HashTrainConfig {
            steps: 5000,
            points_per_batch: 512,
            dirs_per_point: 16,
            ..HashTrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = (self.dirs_per_point as f64).sqrt().round() as usize;
        if s * s != self.dirs_per_point || s == 0 {
            return Err(Error::Config(format!("dirs_per_point {} is not a perfect square", self.dirs_per_point)));
        }
        if self.steps == 0 || self.points_per_batch == 0 {
            return Err(Error::Config("steps and points_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Surface points for hash training: primary hits of a pseudo dataset with
/// oracle materials.
#[derive(Clone, Debug, Default)]
pub struct SurfacePool {
    pub points: Vec<DVec3>,
    pub materials: Vec<BrdfParams>,
}

impl SurfacePool {
    pub fn from_dataset(scene: &SdfScene, data: &PseudoDataset) -> SurfacePool {
        let points: Vec<DVec3> = data
            .gbuffers
            .iter()
            .flat_map(|g| (0..g.len()).filter(|&i| g.covered(i)).map(move |i| g.coord[i]))
            .collect();
        let materials = points.par_iter().map(|p| scene.material_at(*p)).collect();
        SurfacePool { points, materials }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Oracle supervision for a batch of points and their direction fans.
#[derive(Clone, Debug, PartialEq)]
pub struct HashBatch {
    pub points: Vec<DVec3>,
    pub materials: Vec<BrdfParams>,
    pub owners: Vec<u32>,
    pub dirs: Vec<DVec3>,
    pub visible: Vec<bool>,
    pub depth: Vec<f64>,
    /// 1 for forward-facing pairs, 0 for pairs excluded from the loss.
    pub weight: Vec<f64>,
}

/// Draws `points_per_batch` pool entries and `dirs_per_point` stratified
/// sphere directions for each, labelled by the sphere tracer.
pub fn sample_hash_batch(scene: &SdfScene, pool: &SurfacePool, cfg: &HashTrainConfig, near: f64, far: f64, key: u64) -> HashBatch {
    let mut rng = RngStream::new(cfg.seed, mix_key(&[Purpose::Training as u64, key]));
    let picks: Vec<usize> = (0..cfg.points_per_batch).map(|_| rng.next_below(pool.len())).collect();
    let points: Vec<DVec3> = picks.iter().map(|&i| pool.points[i]).collect();
    let materials: Vec<BrdfParams> = picks.iter().map(|&i| pool.materials[i]).collect();
    let mut owners = Vec::with_capacity(points.len() * cfg.dirs_per_point);
    let mut dirs = Vec::with_capacity(owners.capacity());
    for p in 0..points.len() {
        let mut r = rng.fork(p as u64);
        for d in stratified_sphere_dirs(cfg.dirs_per_point, &mut r) {
            owners.push(p as u32);
            dirs.push(d);
        }
    }
    let labels: Vec<_> = owners
        .par_iter()
        .zip(&dirs)
        .map(|(&o, d)| scene.visibility_depth(points[o as usize], *d, near, far))
        .collect();
    let weight = owners
        .iter()
        .zip(&dirs)
        .map(|(&o, d)| if materials[o as usize].normal.dot(*d) > 0.0 { 1.0 } else { 0.0 })
        .collect();
    HashBatch {
        points,
        materials,
        owners,
        dirs,
        visible: labels.iter().map(|l| l.visible).collect(),
        depth: labels.iter().map(|l| l.t).collect(),
        weight,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct HashLoss {
    pub normal: f64,
    pub albedo: f64,
    pub roughness: f64,
    pub depth: f64,
    pub visibility: f64,
}

impl HashLoss {
    pub fn total(&self) -> f64 {
        self.normal + self.albedo + self.roughness + self.depth + self.visibility
    }
}

/// L1 between `lo + scale·σ(z)` and the target, returning the gradient
/// with respect to `z`.
fn sigmoid_l1<T: Real>(z: &[T], target: &[T], weight: &[T], lo: f64, scale: f64) -> Result<(f64, Vec<T>)> {
    let s: Vec<f64> = z.iter().map(|v| sigmoid(v.f64())).collect();
    let p: Vec<T> = s.iter().map(|v| T::of(lo + scale * v)).collect();
    let (l, g) = weighted_l1(&p, target, weight)?;
    Ok((l, g.iter().zip(&s).map(|(g, s)| *g * T::of(scale * s * (1.0 - s))).collect()))
}

/// Decoder loss on raw rows `[P, 7]`; every row is weighted equally.
pub fn decoder_loss<T: Real>(raw: &Tensor<T>, materials: &[BrdfParams]) -> Result<(HashLoss, Tensor<T>)> {
    let p = materials.len();
    raw.expect_shape(&[p, DECODER_OUT])?;
    let col = |c: usize| -> Vec<T> { (0..p).map(|i| raw.data[i * DECODER_OUT + c]).collect() };
    let mut grad = Tensor::zeros(&raw.shape);
    let mut loss = HashLoss::default();
    let ones = vec![T::one(); 3 * p];

    let mut nrm = Vec::with_capacity(3 * p);
    let mut inv = Vec::with_capacity(p);
    let mut tgt = Vec::with_capacity(3 * p);
    for (i, m) in materials.iter().enumerate() {
        let z = DVec3::new(raw.data[i * 7].f64(), raw.data[i * 7 + 1].f64(), raw.data[i * 7 + 2].f64());
        let len = z.length();
        let n = if len > 1e-12 { z / len } else { DVec3::ZERO };
        inv.push(if len > 1e-12 { 1.0 / len } else { 0.0 });
        nrm.extend(n.to_array().map(T::of));
        tgt.extend(m.normal.to_array().map(T::of));
    }
    let (l, g) = weighted_l1(&nrm, &tgt, &ones)?;
    loss.normal = l;
    for i in 0..p {
        let n = DVec3::new(nrm[3 * i].f64(), nrm[3 * i + 1].f64(), nrm[3 * i + 2].f64());
        let gv = DVec3::new(g[3 * i].f64(), g[3 * i + 1].f64(), g[3 * i + 2].f64());
        let d = (gv - n * n.dot(gv)) * inv[i];
        for k in 0..3 {
            grad.data[i * 7 + k] = T::of(d[k]);
        }
    }

    let mut z = Vec::with_capacity(3 * p);
    let mut tgt = Vec::with_capacity(3 * p);
    for (i, m) in materials.iter().enumerate() {
        z.extend_from_slice(&raw.data[i * 7 + 3..i * 7 + 6]);
        tgt.extend(m.albedo.to_array().map(T::of));
    }
    let (l, g) = sigmoid_l1(&z, &tgt, &ones, 0.0, 1.0)?;
    loss.albedo = l;
    for i in 0..p {
        grad.data[i * 7 + 3..i * 7 + 6].copy_from_slice(&g[3 * i..3 * i + 3]);
    }

    let tgt: Vec<T> = materials.iter().map(|m| T::of(m.roughness)).collect();
    let (l, g) = sigmoid_l1(&col(6), &tgt, &ones[..p], ROUGHNESS_MIN, ROUGHNESS_MAX - ROUGHNESS_MIN)?;
    loss.roughness = l;
    for i in 0..p {
        grad.data[i * 7 + 6] = g[i];
    }
    Ok((loss, grad))
}

/// Tracer loss on raw rows `[Q, 2]`: BCE on visibility over forward-facing
/// pairs and L1 on the normalised depth over forward-facing occluded pairs.
/// Visible rays carry depth `far`, a target the sigmoid only reaches at
/// infinity; fitting it saturates the head and starves the occluded rays,
/// whose depth is the only one the integrator reads.
pub fn tracer_loss<T: Real>(raw: &Tensor<T>, batch: &HashBatch, near: f64, far: f64) -> Result<(HashLoss, Tensor<T>)> {
    let q = batch.dirs.len();
    raw.expect_shape(&[q, TRACER_OUT])?;
    let w: Vec<T> = batch.weight.iter().map(|v| T::of(*v)).collect();
    let zv: Vec<T> = (0..q).map(|i| raw.data[2 * i]).collect();
    let zt: Vec<T> = (0..q).map(|i| raw.data[2 * i + 1]).collect();
    let yv: Vec<T> = batch.visible.iter().map(|v| if *v { T::one() } else { T::zero() }).collect();
    let yt: Vec<T> = batch.depth.iter().map(|t| T::of((t - near) / (far - near))).collect();
    let (lv, gv) = weighted_bce_logit(&zv, &yv, &w)?;
    let wt: Vec<T> = batch
        .weight
        .iter()
        .zip(&batch.visible)
        .map(|(w, v)| if *v { T::zero() } else { T::of(*w) })
        .collect();
    let (lt, gt) = sigmoid_l1(&zt, &yt, &wt, 0.0, 1.0)?;
    let mut grad = Tensor::zeros(&raw.shape);
    for i in 0..q {
        grad.data[2 * i] = gv[i];
        grad.data[2 * i + 1] = gt[i];
    }
    Ok((
        HashLoss {
            depth: lt,
            visibility: lv,
            ..HashLoss::default()
        },
        grad,
    ))
}

/// Forward, loss and backward for one batch; parameter gradients are left
/// accumulated in the renderer.
pub fn hash_step<T: Real>(r: &mut HashRenderer<T>, batch: &HashBatch) -> Result<HashLoss> {
    let (near, far) = (r.cfg.near, r.cfg.far);
    let fl = r.cfg.feature_len();
    let pts = Tensor::from_vec(
        &[batch.points.len(), 3],
        batch.points.iter().flat_map(|p| p.to_array()).map(T::of).collect(),
    )?;
    let feats = r.grid.forward(&pts)?;
    let raw_b = r.decoder.forward(&feats)?;
    let q = r.tracer_input(&feats, &batch.owners, &batch.dirs);
    let raw_i = r.tracer.forward(&q)?;
    let (lb, gb) = decoder_loss(&raw_b, &batch.materials)?;
    let (li, gi) = tracer_loss(&raw_i, batch, near, far)?;
    r.zero_grad();
    let mut gf = r.decoder.backward(&gb)?;
    let gq = r.tracer.backward(&gi)?;
    for (row, &o) in gq.data.chunks_exact(fl + 3).zip(&batch.owners) {
        for (d, s) in gf.data[o as usize * fl..(o as usize + 1) * fl].iter_mut().zip(&row[..fl]) {
            *d += *s;
        }
    }
    r.grid.backward(&gf)?;
    Ok(HashLoss {
        depth: li.depth,
        visibility: li.visibility,
        ..lb
    })
}

/// Hash table entries never decay; MLP weights do.
pub fn hash_optimizer(cfg: &HashTrainConfig, r: &mut HashRenderer<f32>) -> Adam<f32> {
    r.decoder.set_decay(true);
    r.tracer.set_decay(true);
    r.grid.table.decay = false;
    Adam::new(cfg.lr0, cfg.weight_decay)
}

pub fn train_hash(
    r: &mut HashRenderer<f32>,
    adam: &mut Adam<f32>,
    scene: &SdfScene,
    pool: &SurfacePool,
    cfg: &HashTrainConfig,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (near, far) = (r.cfg.near, r.cfg.far);
    let mut rows = Vec::new();
    while adam.step < cfg.steps {
        let step = adam.step;
        let batch = sample_hash_batch(scene, pool, cfg, near, far, step);
        let loss = hash_step(r, &batch)?;
        if !loss.total().is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        adam.lr = exp_decay_lr(step, cfg.steps, cfg.lr0, cfg.final_lr_ratio);
        let lr = adam.lr;
        adam.step(r)?;
        rows.push(LossRow {
            step,
            terms: vec![
                ("normal", loss.normal),
                ("albedo", loss.albedo),
                ("roughness", loss.roughness),
                ("depth", loss.depth),
                ("visibility", loss.visibility),
            ],
            total: loss.total(),
            lr,
        });
        if step % 100 == 0 {
            log::info!("hash step {step}: loss {:.5} lr {lr:.2e}", loss.total());
        }
    }
    Ok(rows)
}

/// Held-out agreement of a hash renderer with the oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct HashEval {
    pub pairs: usize,
    pub occluded_pairs: usize,
    pub visibility_accuracy: f64,
    /// Mean |t − t*| over pairs the oracle reports occluded.
    pub occluded_depth_mae: f64,
    pub albedo_l1: f64,
    pub normal_deg: f64,
}

pub fn evaluate_hash<T: Real>(r: &HashRenderer<T>, batch: &HashBatch) -> Result<HashEval> {
    let feats = r.features(&batch.points);
    let pred = r.trace(&feats, &batch.owners, &batch.dirs)?;
    let mut e = HashEval::default();
    let (mut correct, mut mae) = (0usize, 0.0);
    for (i, (v, t)) in pred.iter().enumerate() {
        if batch.weight[i] == 0.0 {
            continue;
        }
        e.pairs += 1;
        if (*v > 0.5) == batch.visible[i] {
            correct += 1;
        }
        if !batch.visible[i] {
            e.occluded_pairs += 1;
            mae += (t - batch.depth[i]).abs();
        }
    }
    e.visibility_accuracy = correct as f64 / e.pairs.max(1) as f64;
    e.occluded_depth_mae = mae / e.occluded_pairs.max(1) as f64;
    let mats = r.decode(&feats)?;
    let (mut al, mut ang) = (0.0, 0.0);
    for (m, t) in mats.iter().zip(&batch.materials) {
        match m {
            Ok(m) => {
                al += (m.albedo - t.albedo).abs().element_sum() / 3.0;
                ang += m.normal.dot(t.normal).clamp(-1.0, 1.0).acos().to_degrees();
            }
            Err(_) => {
                al += 1.0;
                ang += 180.0;
            }
        }
    }
    let p = batch.points.len().max(1) as f64;
    e.albedo_l1 = al / p;
    e.normal_deg = ang / p;
    Ok(e)
}
