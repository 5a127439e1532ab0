//! Multiresolution hash-grid encoder with a BRDF decoder and an implicit
//! ray tracer head. Together they answer "what is the material here" and
//! "is direction ω blocked, and how far" for arbitrary surface points.

use glam::DVec3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use relight_core::brdf::{BrdfParams, ROUGHNESS_MAX, ROUGHNESS_MIN};
use relight_core::integrator::{BounceProvider, VisQuery, VisibilityProvider};
use relight_core::scene::{Aabb, VisibilitySample, FAR, NEAR};
use relight_nn::checkpoint::Checkpoint;
use relight_nn::layers::{gelu, sigmoid};
use relight_nn::{init_rng, join, Layer, Mlp, Module, Param, Real, Tensor};

use crate::{Error, Result};

pub const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
pub const TABLE_INIT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashConfig {
    pub levels: usize,
    pub table_log2: u32,
    pub feature_dim: usize,
    pub n_min: f64,
    pub n_max: f64,
    pub hidden: usize,
    pub near: f64,
    pub far: f64,
}

impl HashConfig {
    pub fn full() -> HashConfig {
        HashConfig {
            levels: 14,
            table_log2: 17,
            feature_dim: 2,
            n_min: 16.0,
            n_max: 131_072.0,
            hidden: 64,
            near: NEAR,
            far: FAR,
        }
    }

    pub fn desk() -> HashConfig {
        HashConfig {
            table_log2: 14,
            n_max: 1024.0,
            ..HashConfig::full()
        }
    }

    /// Per-level growth factor `b` with `n_max = n_min · b^(L−1)`.
    pub fn growth(&self) -> f64 {
        if self.levels < 2 {
            return 1.0;
        }
        ((self.n_max.ln() - self.n_min.ln()) / (self.levels - 1) as f64).exp()
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.n_min * self.growth().powi(level as i32) + 1e-6).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_log2
    }

    pub fn feature_len(&self) -> usize {
        self.levels * self.feature_dim
    }

    /// Whether level `l` indexes its grid directly instead of hashing.
    pub fn is_dense(&self, level: usize) -> bool {
        let n = self.resolution(level) as u64 + 1;
        n * n * n <= self.table_size() as u64
    }
}

/// Spatial hash of an integer grid vertex.
#[inline]
pub fn spatial_hash(v: [u32; 3], table_size: usize) -> u32 {
    let h = v[0].wrapping_mul(PRIMES[0]) ^ v[1].wrapping_mul(PRIMES[1]) ^ v[2].wrapping_mul(PRIMES[2]);
    h & (table_size as u32 - 1)
}

/// Trainable tables `[levels, table_size, feature_dim]` over a box.
pub struct HashGrid<T: Real> {
    pub cfg: HashConfig,
    pub lo: DVec3,
    pub hi: DVec3,
    pub table: Param<T>,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
    /// Corner indices and weights of the last forward batch.
    cache: Option<(Vec<u32>, Vec<T>)>,
    clamped: AtomicU64,
}

impl<T: Real> HashGrid<T> {
    pub fn new(cfg: HashConfig, bounds: Aabb, rng: &mut impl Rng) -> HashGrid<T> {
        let n = cfg.levels * cfg.table_size() * cfg.feature_dim;
        let data = (0..n).map(|_| T::of((rng.random::<f64>() * 2.0 - 1.0) * TABLE_INIT)).collect();
        let table = Tensor {
            shape: vec![cfg.levels, cfg.table_size(), cfg.feature_dim],
            data,
        };
        HashGrid {
            cfg,
            lo: bounds.min,
            hi: bounds.max,
            table: Param::new(table, false),
            resolutions: (0..cfg.levels).map(|l| cfg.resolution(l)).collect(),
            dense: (0..cfg.levels).map(|l| cfg.is_dense(l)).collect(),
            cache: None,
            clamped: AtomicU64::new(0),
        }
    }

    /// Points that fell outside the box and were clamped onto it.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn normalize(&self, x: DVec3) -> DVec3 {
        let p = (x - self.lo) / (self.hi - self.lo);
        let c = p.clamp(DVec3::ZERO, DVec3::ONE);
        if c != p {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        c
    }

    /// Table slot of grid vertex `v` at `level`.
    pub fn slot(&self, level: usize, v: [u32; 3]) -> u32 {
        if self.dense[level] {
            let n = self.resolutions[level] as u32 + 1;
            v[0] + n * (v[1] + n * v[2])
        } else {
            spatial_hash(v, self.cfg.table_size())
        }
    }

    /// The eight corner slots and trilinear weights of `p ∈ [0,1]³`.
    pub fn corners(&self, level: usize, p: DVec3) -> [(u32, f64); 8] {
        let n = self.resolutions[level];
        let s = p * n as f64;
        let base = s.floor().clamp(DVec3::ZERO, DVec3::splat((n - 1) as f64));
        let f = s - base;
        let b = [base.x as u32, base.y as u32, base.z as u32];
        let mut out = [(0u32, 0.0); 8];
        for (c, o) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = ((c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32);
            let w = (if dx == 1 { f.x } else { 1.0 - f.x })
                * (if dy == 1 { f.y } else { 1.0 - f.y })
                * (if dz == 1 { f.z } else { 1.0 - f.z });
            *o = (self.slot(level, [b[0] + dx, b[1] + dy, b[2] + dz]), w);
        }
        out
    }

    fn encode_into(&self, x: DVec3, out: &mut [T], record: Option<(&mut [u32], &mut [T])>) {
        let p = self.normalize(x);
        let (fd, ts) = (self.cfg.feature_dim, self.cfg.table_size());
        let table = &self.table.value.data;
        let mut rec = record;
        for l in 0..self.cfg.levels {
            let corners = self.corners(l, p);
            let dst = &mut out[l * fd..(l + 1) * fd];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for (c, (slot, w)) in corners.iter().enumerate() {
                let w = T::of(*w);
                let src = &table[(l * ts + *slot as usize) * fd..][..fd];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * *s;
                }
                if let Some((idx, ws)) = rec.as_mut() {
                    idx[l * 8 + c] = *slot;
                    ws[l * 8 + c] = w;
                }
            }
        }
    }

    /// Feature vector of a single point.
    pub fn encode(&self, x: DVec3) -> Vec<T> {
        let mut out = vec![T::zero(); self.cfg.feature_len()];
        self.encode_into(x, &mut out, None);
        out
    }

    pub fn encode_points(&self, points: &[DVec3]) -> Tensor<T> {
        let fl = self.cfg.feature_len();
        let mut out = Tensor::zeros(&[points.len(), fl]);
        for (p, row) in points.iter().zip(out.data.chunks_exact_mut(fl)) {
            self.encode_into(*p, row, None);
        }
        out
    }
}

fn points_of<T: Real>(x: &Tensor<T>) -> Result<Vec<DVec3>, relight_nn::Error> {
    let (_, d) = x.dims2()?;
    if d != 3 {
        x.expect_shape(&[x.shape[0], 3])?;
    }
    Ok(x.data
        .chunks_exact(3)
        .map(|c| DVec3::new(c[0].f64(), c[1].f64(), c[2].f64()))
        .collect())
}

impl<T: Real> Module<T> for HashGrid<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

/// Input `[N, 3]` world points, output `[N, levels·feature_dim]`. Points are
/// data, so the input gradient returned by `backward` is zero.
impl<T: Real> Layer<T> for HashGrid<T> {
    fn infer(&self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        Ok(self.encode_points(&points_of(x)?))
    }

    fn forward(&mut self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let pts = points_of(x)?;
        let (fl, l8) = (self.cfg.feature_len(), self.cfg.levels * 8);
        let mut out = Tensor::zeros(&[pts.len(), fl]);
        let mut idx = vec![0u32; pts.len() * l8];
        let mut ws = vec![T::zero(); pts.len() * l8];
        for (i, p) in pts.iter().enumerate() {
            let rec = (&mut idx[i * l8..(i + 1) * l8], &mut ws[i * l8..(i + 1) * l8]);
            self.encode_into(*p, &mut out.data[i * fl..(i + 1) * fl], Some(rec));
        }
        self.cache = Some((idx, ws));
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let (idx, ws) = self.cache.take().ok_or(relight_nn::Error::NoForward)?;
        let (fd, ts, levels) = (self.cfg.feature_dim, self.cfg.table_size(), self.cfg.levels);
        let n = idx.len() / (levels * 8);
        g.expect_shape(&[n, self.cfg.feature_len()])?;
        let grad = &mut self.table.grad;
        for i in 0..n {
            let gi = &g.data[i * levels * fd..(i + 1) * levels * fd];
            for l in 0..levels {
                for c in 0..8 {
                    let k = (i * levels + l) * 8 + c;
                    let (slot, w) = (idx[k] as usize, ws[k]);
                    let dst = &mut grad[(l * ts + slot) * fd..][..fd];
                    for (d, gv) in dst.iter_mut().zip(&gi[l * fd..(l + 1) * fd]) {
                        *d += w * *gv;
                    }
                }
            }
        }
        Ok(Tensor::zeros(&[n, 3]))
    }
}

/// Maps the decoder's 7 raw outputs to shading parameters.
pub fn decode_brdf_raw(raw: &[f64]) -> Result<BrdfParams> {
    let n = DVec3::new(raw[0], raw[1], raw[2]);
    let len = n.length();
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::DegenerateNormalPrediction);
    }
    let a = DVec3::new(sigmoid(raw[3]), sigmoid(raw[4]), sigmoid(raw[5]));
    let r = ROUGHNESS_MIN + (ROUGHNESS_MAX - ROUGHNESS_MIN) * sigmoid(raw[6]);
    Ok(BrdfParams {
        albedo: a,
        roughness: r,
        normal: n / len,
    })
}

/// Maps the tracer's 2 raw outputs to (visibility probability, depth).
pub fn map_visibility(raw: &[f64], near: f64, far: f64) -> (f64, f64) {
    (sigmoid(raw[0]), near + (far - near) * sigmoid(raw[1]))
}

pub fn secondary_point(x: DVec3, wi: DVec3, t: f64) -> DVec3 {
    x + t * wi
}

pub const DECODER_OUT: usize = 7;
pub const TRACER_OUT: usize = 2;

/// Encoder H, decoder B and implicit ray tracer I.
pub struct HashRenderer<T: Real> {
    pub cfg: HashConfig,
    pub grid: HashGrid<T>,
    pub decoder: Mlp<T>,
    pub tracer: Mlp<T>,
}

#[derive(Serialize, Deserialize)]
struct HashMeta {
    kind: String,
    config: HashConfig,
    lo: [f64; 3],
    hi: [f64; 3],
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Real> HashRenderer<T> {
    pub fn new(cfg: HashConfig, bounds: Aabb, seed: u64) -> HashRenderer<T> {
        let mut rng = init_rng(seed);
        let grid = HashGrid::new(cfg, bounds, &mut rng);
        let fl = cfg.feature_len();
        HashRenderer {
            cfg,
            grid,
            decoder: Mlp::new(&[fl, cfg.hidden, cfg.hidden, DECODER_OUT], &mut rng),
            tracer: Mlp::new(&[fl + 3, cfg.hidden, cfg.hidden, TRACER_OUT], &mut rng),
        }
    }

    /// Bounds a scene box with a small margin so surface points never clamp.
    pub fn bounds_for(aabb: &Aabb) -> Aabb {
        aabb.expanded(0.02 * aabb.extent().max_element().max(1e-3))
    }

    pub fn features(&self, points: &[DVec3]) -> Tensor<T> {
        self.grid.encode_points(points)
    }

    /// Tracer input rows `f(points[q.point]) ⊕ q.dir`.
    pub fn tracer_input(&self, features: &Tensor<T>, owners: &[u32], dirs: &[DVec3]) -> Tensor<T> {
        let fl = self.cfg.feature_len();
        let mut x = Tensor::zeros(&[dirs.len(), fl + 3]);
        for ((row, &o), d) in x.data.chunks_exact_mut(fl + 3).zip(owners).zip(dirs) {
            row[..fl].copy_from_slice(&features.data[o as usize * fl..(o as usize + 1) * fl]);
            row[fl] = T::of(d.x);
            row[fl + 1] = T::of(d.y);
            row[fl + 2] = T::of(d.z);
        }
        x
    }

    pub fn decode(&self, features: &Tensor<T>) -> Result<Vec<Result<BrdfParams>>> {
        let raw = self.decoder.infer(features)?;
        Ok(raw
            .data
            .chunks_exact(DECODER_OUT)
            .map(|r| decode_brdf_raw(&r.iter().map(|v| v.f64()).collect::<Vec<_>>()))
            .collect())
    }

    /// `(v, t)` for each query; `owners[i]` indexes the feature row.
    ///
    /// Same result as `tracer.infer(tracer_input(..))` up to rounding, but
    /// the feature half of the first layer runs once per point instead of
    /// once per query.
    pub fn trace(&self, features: &Tensor<T>, owners: &[u32], dirs: &[DVec3]) -> Result<Vec<(f64, f64)>> {
        let (np, fl) = features.dims2()?;
        let first = &self.tracer.layers[0];
        let (hid, stride) = (first.out_dim(), first.in_dim());
        if stride != fl + 3 {
            return Err(Error::Config(format!("tracer expects {} features, got {fl}", stride - 3)));
        }
        let w0 = &first.weight.value.data;
        let mut shared = Vec::with_capacity(np * hid);
        for _ in 0..np {
            shared.extend_from_slice(&first.bias.value.data);
        }
        T::gemm_raw(np, fl, hid, &features.data, fl as isize, 1, w0, 1, stride as isize, T::one(), &mut shared, hid as isize, 1);
        let wd: [Vec<T>; 3] = std::array::from_fn(|a| (0..hid).map(|j| w0[j * stride + fl + a]).collect());
        let mut h = Tensor::zeros(&[dirs.len(), hid]);
        for ((row, &o), d) in h.data.chunks_exact_mut(hid).zip(owners).zip(dirs) {
            let base = &shared[o as usize * hid..][..hid];
            let (dx, dy, dz) = (T::of(d.x), T::of(d.y), T::of(d.z));
            for j in 0..hid {
                row[j] = gelu(base[j] + wd[0][j] * dx + wd[1][j] * dy + wd[2][j] * dz);
            }
        }
        let last = self.tracer.layers.len() - 1;
        for (i, l) in self.tracer.layers.iter().enumerate().skip(1) {
            h = l.infer(&h)?;
            if i < last {
                h.data.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        let raw = h;
        Ok(raw
            .data
            .chunks_exact(TRACER_OUT)
            .map(|r| map_visibility(&[r[0].f64(), r[1].f64()], self.cfg.near, self.cfg.far))
            .collect())
    }

    /// MACs of one tracer query, excluding the shared encoding.
    pub fn tracer_macs(&self) -> u64 {
        self.tracer.macs_per_row()
    }

    /// Weights plus metadata, ready for extra entries such as optimizer state.
    pub fn checkpoint(&mut self, extra: serde_json::Value) -> Checkpoint {
        let meta = HashMeta {
            kind: "hash-renderer".into(),
            config: self.cfg,
            lo: self.grid.lo.to_array(),
            hi: self.grid.hi.to_array(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("serializable"));
        ck.add_module("", self);
        ck
    }

    pub fn save(&mut self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.checkpoint(extra).write(path)?;
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(HashRenderer<T>, serde_json::Value)> {
        let meta: HashMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("hash checkpoint meta: {e}")))?;
        if meta.kind != "hash-renderer" {
            return Err(Error::Config(format!("expected hash-renderer checkpoint, found {}", meta.kind)));
        }
        let bounds = Aabb {
            min: DVec3::from_array(meta.lo),
            max: DVec3::from_array(meta.hi),
        };
        let mut r = HashRenderer::new(meta.config, bounds, 0);
        ck.load_module("", &mut r)?;
        Ok((r, meta.extra))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(HashRenderer<T>, serde_json::Value)> {
        HashRenderer::from_checkpoint(&Checkpoint::read(path)?)
    }
}

impl<T: Real> Module<T> for HashRenderer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.grid.visit_params(&join(prefix, "grid"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.tracer.visit_params(&join(prefix, "tracer"), f);
    }
}

impl<T: Real> VisibilityProvider for HashRenderer<T> {
    fn vis_depth(&self, points: &[DVec3], queries: &[VisQuery]) -> Vec<VisibilitySample> {
        if queries.is_empty() {
            return Vec::new();
        }
        let features = self.features(points);
        let owners: Vec<u32> = queries.iter().map(|q| q.point).collect();
        let dirs: Vec<DVec3> = queries.iter().map(|q| q.dir).collect();
        let out = self.trace(&features, &owners, &dirs).expect("tracer input shape is constructed");
        out.into_iter()
            .map(|(v, t)| VisibilitySample { visible: v > 0.5, t })
            .collect()
    }
}

impl<T: Real> BounceProvider for HashRenderer<T> {
    fn materials(&self, points: &[DVec3]) -> Vec<Option<BrdfParams>> {
        if points.is_empty() {
            return Vec::new();
        }
        let features = self.features(points);
        self.decode(&features)
            .expect("decoder input shape is constructed")
            .into_iter()
            .map(|r| r.ok())
            .collect()
    }
}
