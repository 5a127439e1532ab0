//! Direct-illumination renderer: one forward pass maps a downsampled ray
//! map to full-resolution material, normal, coordinate and mask planes.

use glam::DVec3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use relight_core::brdf::{ROUGHNESS_MAX, ROUGHNESS_MIN};
use relight_core::integrator::SurfaceProvider;
use relight_core::scene::{Aabb, Camera, GBuffer, GPixel};
use relight_nn::checkpoint::Checkpoint;
use relight_nn::layers::{kaiming_uniform, sigmoid, upsample2x, upsample2x_backward};
use relight_nn::loss::{weighted_bce_logit, weighted_l1};
use relight_nn::{init_rng, join, Conv2d, ConvTranspose2d, Gelu, InstanceNorm, Layer, Module, Param, Real, Tensor};

use crate::{Error, Result};

pub const RAYMAP_CHANNELS: usize = 6;
pub const HEAD_CHANNELS: usize = 11;
pub const ALBEDO: usize = 0;
pub const NORMAL: usize = 3;
pub const ROUGHNESS: usize = 6;
pub const COORD: usize = 7;
pub const MASK: usize = 10;
/// Norm below which the normal loss stops normalizing.
pub const NORMAL_EPS: f64 = 1e-2;
/// Margin added around the scene box before normalising coordinates.
pub const COORD_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub stem_channels: usize,
    pub trunk_depth: usize,
    pub sr_channels: Vec<usize>,
    /// Test fixture: replace bilinear upsampling with a stride-2 transposed
    /// convolution inside the SR blocks.
    #[serde(default)]
    pub transposed_upsampler: bool,
}

impl CnnConfig {
    pub fn full() -> CnnConfig {
        CnnConfig {
            stem_channels: 256,
            trunk_depth: 28,
            sr_channels: vec![128, 64, 32],
            transposed_upsampler: false,
        }
    }

    pub fn desk() -> CnnConfig {
        CnnConfig {
            stem_channels: 64,
            trunk_depth: 4,
            sr_channels: vec![32, 16, 8],
            transposed_upsampler: false,
        }
    }

    /// Every width halved.
    pub fn halved(&self) -> CnnConfig {
        CnnConfig {
            stem_channels: (self.stem_channels / 2).max(1),
            sr_channels: self.sr_channels.iter().map(|c| (c / 2).max(1)).collect(),
            ..self.clone()
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.sr_channels.len()
    }
}

/// Downsampled ray map `[1, 6, h/d, w/d]`: broadcast origin, then unit
/// directions through the centres of the downsampled pixels.
pub fn build_raymap<T: Real>(camera: &Camera, downsample: usize) -> Result<Tensor<T>> {
    let (w, h) = (camera.width, camera.height);
    if downsample == 0 || w % downsample != 0 || h % downsample != 0 {
        return Err(Error::Indivisible(w, h, downsample));
    }
    let small = camera.with_resolution(w / downsample, h / downsample);
    let (sw, sh) = (small.width, small.height);
    let mut t = Tensor::zeros(&[1, RAYMAP_CHANNELS, sh, sw]);
    let o = camera.position;
    for y in 0..sh {
        for x in 0..sw {
            let d = small.pixel_ray(x, y).direction;
            let v = [o.x, o.y, o.z, d.x, d.y, d.z];
            for (c, v) in v.iter().enumerate() {
                t.data[(c * sh + y) * sw + x] = T::of(*v);
            }
        }
    }
    Ok(t)
}

/// Stacks single-image ray maps along the batch axis.
pub fn stack<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or(Error::EmptyDataset)?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        t.expect_shape(&[1, c, h, w])?;
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor::from_vec(&[items.len(), c, h, w], data)?)
}

/// Conv, instance norm, GELU.
pub struct ConvNormAct<T: Real> {
    pub conv: Conv2d<T>,
    pub norm: InstanceNorm<T>,
    act: Gelu<T>,
}

impl<T: Real> ConvNormAct<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> ConvNormAct<T> {
        ConvNormAct {
            conv: Conv2d::new(cin, cout, kernel, rng),
            norm: InstanceNorm::new(cout),
            act: Gelu::new(),
        }
    }
}

impl<T: Real> Module<T> for ConvNormAct<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

impl<T: Real> Layer<T> for ConvNormAct<T> {
    fn infer(&self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        self.act.infer(&self.norm.infer(&self.conv.infer(x)?)?)
    }

    fn forward(&mut self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.norm.forward(&y)?;
        self.act.forward(&y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let g = self.act.backward(g)?;
        let g = self.norm.backward(&g)?;
        self.conv.backward(&g)
    }
}

pub struct SrBlock<T: Real> {
    /// Present only in the transposed-convolution fixture.
    pub up: Option<ConvTranspose2d<T>>,
    pub conv1: ConvNormAct<T>,
    pub conv2: ConvNormAct<T>,
    pub head: Conv2d<T>,
}

impl<T: Real> SrBlock<T> {
    fn upsample_infer(&self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        match &self.up {
            Some(u) => u.infer(x),
            None => upsample2x(x),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> relight_nn::Result<(Tensor<T>, Tensor<T>)> {
        let h = self.conv2.infer(&self.conv1.infer(&self.upsample_infer(x)?)?)?;
        let o = self.head.infer(&h)?;
        Ok((h, o))
    }
}

impl<T: Real> Module<T> for SrBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(u) = &mut self.up {
            u.visit_params(&join(prefix, "up"), f);
        }
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// Static cost of one forward pass on a `h × w` ray map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCost {
    pub stem_macs: u64,
    pub trunk_macs: u64,
    pub block_macs: u64,
    pub head_macs: u64,
    pub params: u64,
}

impl ForwardCost {
    pub fn macs(&self) -> u64 {
        self.stem_macs + self.trunk_macs + self.block_macs + self.head_macs
    }
}

struct ForwardCache {
    block_in_shapes: Vec<Vec<usize>>,
    out_shapes: Vec<Vec<usize>>,
}

pub struct DirectRenderer<T: Real> {
    pub cfg: CnnConfig,
    /// Box that the coordinate head spans.
    pub lo: DVec3,
    pub hi: DVec3,
    pub stem: ConvNormAct<T>,
    pub trunk: Vec<ConvNormAct<T>>,
    pub blocks: Vec<SrBlock<T>>,
    cache: Option<ForwardCache>,
}

#[derive(Serialize, Deserialize)]
struct CnnMeta {
    kind: String,
    config: CnnConfig,
    lo: [f64; 3],
    hi: [f64; 3],
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Real> DirectRenderer<T> {
    /// Heads start at zero; everything else is Kaiming-uniform.
    pub fn new(cfg: CnnConfig, coord_box: Aabb, seed: u64) -> DirectRenderer<T> {
        let mut rng = init_rng(seed);
        let c0 = cfg.stem_channels;
        let stem = ConvNormAct::new(RAYMAP_CHANNELS, c0, 1, &mut rng);
        let trunk = (0..cfg.trunk_depth).map(|_| ConvNormAct::new(c0, c0, 1, &mut rng)).collect();
        let mut cin = c0;
        let mut blocks = Vec::new();
        for &c in &cfg.sr_channels {
            blocks.push(SrBlock {
                up: cfg.transposed_upsampler.then(|| ConvTranspose2d::new(cin, cin, &mut rng)),
                conv1: ConvNormAct::new(cin, c, 3, &mut rng),
                conv2: ConvNormAct::new(c, c, 3, &mut rng),
                head: Conv2d::zeroed(c, HEAD_CHANNELS, 1),
            });
            cin = c;
        }
        DirectRenderer {
            cfg,
            lo: coord_box.min,
            hi: coord_box.max,
            stem,
            trunk,
            blocks,
            cache: None,
        }
    }

    /// Scene box widened by [`COORD_MARGIN`] of its largest extent.
    pub fn coord_box_for(scene_box: &Aabb) -> Aabb {
        scene_box.expanded(COORD_MARGIN * scene_box.extent().max_element().max(1e-3))
    }

    /// Redraws every parameter, heads and norm affines included. Used by
    /// property tests that need an untrained but non-degenerate network.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = init_rng(seed);
        self.visit_params("", &mut |name, p| {
            let shape = p.value.shape.clone();
            p.value = if name.ends_with("gamma") {
                Tensor::from_vec(&shape, (0..p.value.len()).map(|_| T::of(0.5 + rng.random::<f64>())).collect()).unwrap()
            } else if name.ends_with("beta") || name.ends_with("bias") {
                Tensor::from_vec(&shape, (0..p.value.len()).map(|_| T::of(rng.random::<f64>() - 0.5)).collect()).unwrap()
            } else {
                let fan_in = p.value.len() / shape[0];
                kaiming_uniform(&mut rng, &shape, fan_in)
            };
        });
    }

    pub fn zero_heads_from(&mut self, block: usize) {
        for b in &mut self.blocks[block..] {
            b.head.weight.value.data.iter_mut().for_each(|v| *v = T::zero());
            b.head.bias.value.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn count_forward_cost(&mut self, h: usize, w: usize) -> ForwardCost {
        let mut cost = ForwardCost {
            stem_macs: self.stem.conv.macs(h, w),
            trunk_macs: self.trunk.iter().map(|l| l.conv.macs(h, w)).sum(),
            ..ForwardCost::default()
        };
        let (mut h, mut w) = (h, w);
        for b in &self.blocks {
            if let Some(u) = &b.up {
                let (ci, co) = (u.weight.value.shape[0] as u64, u.weight.value.shape[1] as u64);
                cost.block_macs += ci * co * 9 * (h * w) as u64;
            }
            h *= 2;
            w *= 2;
            cost.block_macs += b.conv1.conv.macs(h, w) + b.conv2.conv.macs(h, w);
            cost.head_macs += b.head.macs(h, w);
        }
        cost.params = self.param_count() as u64;
        cost
    }

    /// Maps raw head outputs `[N, 11, H, W]` to one G-buffer per sample.
    pub fn to_gbuffers(&self, raw: &Tensor<T>, origins: &[DVec3]) -> Result<Vec<GBuffer>> {
        let (n, c, h, w) = raw.dims4()?;
        raw.expect_shape(&[n, HEAD_CHANNELS, h, w])?;
        if origins.len() != n {
            return Err(Error::Config(format!("{} origins for batch of {n}", origins.len())));
        }
        let hw = h * w;
        let extent = self.hi - self.lo;
        let mut out = Vec::with_capacity(n);
        for (s, o) in origins.iter().enumerate() {
            let at = |ch: usize, i: usize| raw.data[(s * c + ch) * hw + i].f64();
            let v3 = |ch: usize, i: usize| DVec3::new(at(ch, i), at(ch + 1, i), at(ch + 2, i));
            let pixels = (0..hw).map(|i| {
                let n = v3(NORMAL, i);
                let len = n.length();
                let coord = self.lo + v3(COORD, i).map(sigmoid) * extent;
                GPixel {
                    albedo: v3(ALBEDO, i).map(sigmoid),
                    roughness: ROUGHNESS_MIN + (ROUGHNESS_MAX - ROUGHNESS_MIN) * sigmoid(at(ROUGHNESS, i)),
                    normal: if len > 0.0 { n / len } else { DVec3::ZERO },
                    coord,
                    mask: sigmoid(at(MASK, i)),
                    depth: (coord - *o).length(),
                }
            });
            out.push(GBuffer::from_pixels(w, h, pixels));
        }
        Ok(out)
    }

    /// One forward pass per camera; the batch shares a single call.
    pub fn forward_gbuffer(&self, cameras: &[Camera]) -> Result<Vec<GBuffer>> {
        let maps = cameras
            .iter()
            .map(|c| build_raymap::<T>(c, self.cfg.downsample()))
            .collect::<Result<Vec<_>>>()?;
        let raw = self.infer(&stack(&maps.iter().collect::<Vec<_>>())?)?;
        self.to_gbuffers(&raw, &cameras.iter().map(|c| c.position).collect::<Vec<_>>())
    }

    /// Weights plus metadata, ready for extra entries such as optimizer state.
    pub fn checkpoint(&mut self, extra: serde_json::Value) -> Checkpoint {
        let meta = CnnMeta {
            kind: "cnn-renderer".into(),
            config: self.cfg.clone(),
            lo: self.lo.to_array(),
            hi: self.hi.to_array(),
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

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(DirectRenderer<T>, serde_json::Value)> {
        let meta: CnnMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("cnn checkpoint meta: {e}")))?;
        if meta.kind != "cnn-renderer" {
            return Err(Error::Config(format!("expected cnn-renderer checkpoint, found {}", meta.kind)));
        }
        let bx = Aabb {
            min: DVec3::from_array(meta.lo),
            max: DVec3::from_array(meta.hi),
        };
        let mut r = DirectRenderer::new(meta.config, bx, 0);
        ck.load_module("", &mut r)?;
        Ok((r, meta.extra))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(DirectRenderer<T>, serde_json::Value)> {
        DirectRenderer::from_checkpoint(&Checkpoint::read(path)?)
    }
}

impl<T: Real> Module<T> for DirectRenderer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("trunk{i}")), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("sr{i}")), f);
        }
    }
}

/// Input `[N, 6, h, w]`, output raw head logits `[N, 11, 8h, 8w]`.
impl<T: Real> Layer<T> for DirectRenderer<T> {
    fn infer(&self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let mut h = self.stem.infer(x)?;
        for l in &self.trunk {
            h = h.add(&l.infer(&h)?)?;
        }
        let mut out: Option<Tensor<T>> = None;
        for b in &self.blocks {
            let (hn, o) = b.infer(&h)?;
            h = hn;
            out = Some(match out {
                Some(prev) => upsample2x(&prev)?.add(&o)?,
                None => o,
            });
        }
        Ok(out.unwrap_or(h))
    }

    fn forward(&mut self, x: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let mut h = self.stem.forward(x)?;
        for l in &mut self.trunk {
            let f = l.forward(&h)?;
            h = h.add(&f)?;
        }
        let mut cache = ForwardCache {
            block_in_shapes: Vec::new(),
            out_shapes: Vec::new(),
        };
        let mut out: Option<Tensor<T>> = None;
        for b in &mut self.blocks {
            cache.block_in_shapes.push(h.shape.clone());
            let u = match &mut b.up {
                Some(u) => u.forward(&h)?,
                None => upsample2x(&h)?,
            };
            h = b.conv2.forward(&b.conv1.forward(&u)?)?;
            let o = b.head.forward(&h)?;
            out = Some(match out {
                Some(prev) => {
                    cache.out_shapes.push(prev.shape.clone());
                    upsample2x(&prev)?.add(&o)?
                }
                None => o,
            });
        }
        self.cache = Some(cache);
        Ok(out.unwrap_or(h))
    }

    fn backward(&mut self, g: &Tensor<T>) -> relight_nn::Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(relight_nn::Error::NoForward)?;
        let mut g_out = g.clone();
        let mut carry: Option<Tensor<T>> = None;
        for k in (0..self.blocks.len()).rev() {
            let b = &mut self.blocks[k];
            let mut gh = b.head.backward(&g_out)?;
            if let Some(c) = carry.take() {
                gh = gh.add(&c)?;
            }
            let gu = b.conv1.backward(&b.conv2.backward(&gh)?)?;
            carry = Some(match &mut b.up {
                Some(u) => u.backward(&gu)?,
                None => upsample2x_backward(&gu, &cache.block_in_shapes[k])?,
            });
            if k > 0 {
                g_out = upsample2x_backward(&g_out, &cache.out_shapes[k - 1])?;
            }
        }
        let mut gh = carry.unwrap_or(g_out);
        for l in self.trunk.iter_mut().rev() {
            gh = gh.add(&l.backward(&gh)?)?;
        }
        self.stem.backward(&gh)
    }
}

/// Provider wrapper: G-buffers come from one CNN forward pass.
pub struct CnnSurface<'a, T: Real> {
    pub model: &'a DirectRenderer<T>,
}

impl<T: Real> SurfaceProvider for CnnSurface<'_, T> {
    fn surface(&self, camera: &Camera) -> relight_core::Result<GBuffer> {
        self.model
            .forward_gbuffer(std::slice::from_ref(camera))
            .map(|mut v| v.remove(0))
            .map_err(|e| relight_core::Error::ShapeMismatch(e.to_string()))
    }
}

/// Supervision in mapped space `[N, 11, H, W]`: albedo, normal, roughness,
/// box-normalised coordinate (clamped to [0,1]) and binary mask.
pub fn gbuffer_targets<T: Real>(gbuffers: &[&GBuffer], lo: DVec3, hi: DVec3) -> Result<Tensor<T>> {
    let first = gbuffers.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width, first.height);
    let hw = w * h;
    let mut t = Tensor::zeros(&[gbuffers.len(), HEAD_CHANNELS, h, w]);
    for (s, gb) in gbuffers.iter().enumerate() {
        if (gb.width, gb.height) != (w, h) {
            return Err(Error::Config(format!("mixed G-buffer sizes {}x{} and {w}x{h}", gb.width, gb.height)));
        }
        let base = s * HEAD_CHANNELS * hw;
        let mut put = |ch: usize, i: usize, v: f64| t.data[base + ch * hw + i] = T::of(v);
        for i in 0..hw {
            let covered = gb.covered(i);
            let c = ((gb.coord[i] - lo) / (hi - lo)).clamp(DVec3::ZERO, DVec3::ONE);
            for k in 0..3 {
                put(ALBEDO + k, i, gb.albedo[i][k]);
                put(NORMAL + k, i, gb.normal[i][k]);
                put(COORD + k, i, c[k]);
            }
            put(ROUGHNESS, i, gb.roughness[i]);
            put(MASK, i, if covered { 1.0 } else { 0.0 });
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CnnLoss {
    pub albedo: f64,
    pub normal: f64,
    pub roughness: f64,
    pub coord: f64,
    pub mask: f64,
}

impl CnnLoss {
    pub fn total(&self) -> f64 {
        self.albedo + self.normal + self.roughness + self.coord + self.mask
    }
}

/// Loss terms and the gradient with respect to the raw logits. Material
/// and normal terms are masked by the target mask; coordinates are
/// supervised everywhere, the mask by BCE.
pub fn cnn_loss<T: Real>(raw: &Tensor<T>, target: &Tensor<T>) -> Result<(CnnLoss, Tensor<T>)> {
    let (n, c, h, w) = raw.dims4()?;
    target.expect_shape(&raw.shape)?;
    if c != HEAD_CHANNELS {
        return Err(Error::Config(format!("{c} head channels")));
    }
    let hw = h * w;
    let plane = |t: &Tensor<T>, s: usize, ch: usize| -> Vec<T> { t.data[(s * c + ch) * hw..][..hw].to_vec() };
    let gather = |t: &Tensor<T>, ch: std::ops::Range<usize>| -> Vec<T> {
        let mut v = Vec::with_capacity(n * ch.len() * hw);
        for s in 0..n {
            for k in ch.clone() {
                v.extend(plane(t, s, k));
            }
        }
        v
    };
    let scatter = |g: &mut Tensor<T>, ch: std::ops::Range<usize>, vals: &[T]| {
        let mut it = vals.iter();
        for s in 0..n {
            for k in ch.clone() {
                for d in &mut g.data[(s * c + k) * hw..][..hw] {
                    *d = *it.next().expect("sized");
                }
            }
        }
    };
    let mask_of = |k: usize| -> Vec<T> {
        let mut v = Vec::with_capacity(n * k * hw);
        for s in 0..n {
            let m = plane(target, s, MASK);
            for _ in 0..k {
                v.extend_from_slice(&m);
            }
        }
        v
    };
    let mut grad = Tensor::zeros(&raw.shape);
    let mut loss = CnnLoss::default();

    // Sigmoid-mapped channels.
    let sig = |ch: std::ops::Range<usize>, lo: f64, scale: f64| -> (Vec<T>, Vec<T>) {
        let z = gather(raw, ch);
        let s: Vec<T> = z.iter().map(|v| sigmoid(*v)).collect();
        let p = s.iter().map(|v| T::of(lo + scale * v.f64())).collect();
        (s, p)
    };
    let chain = |s: &[T], g: Vec<T>, scale: f64| -> Vec<T> {
        s.iter().zip(g).map(|(s, g)| g * T::of(scale) * *s * (T::one() - *s)).collect()
    };

    let (s, p) = sig(ALBEDO..ALBEDO + 3, 0.0, 1.0);
    let (l, g) = weighted_l1(&p, &gather(target, ALBEDO..ALBEDO + 3), &mask_of(3))?;
    loss.albedo = l;
    scatter(&mut grad, ALBEDO..ALBEDO + 3, &chain(&s, g, 1.0));

    let rs = ROUGHNESS_MAX - ROUGHNESS_MIN;
    let (s, p) = sig(ROUGHNESS..ROUGHNESS + 1, ROUGHNESS_MIN, rs);
    let (l, g) = weighted_l1(&p, &gather(target, ROUGHNESS..ROUGHNESS + 1), &mask_of(1))?;
    loss.roughness = l;
    scatter(&mut grad, ROUGHNESS..ROUGHNESS + 1, &chain(&s, g, rs));

    let (s, p) = sig(COORD..COORD + 3, 0.0, 1.0);
    let ones = vec![T::one(); p.len()];
    let (l, g) = weighted_l1(&p, &gather(target, COORD..COORD + 3), &ones)?;
    loss.coord = l;
    scatter(&mut grad, COORD..COORD + 3, &chain(&s, g, 1.0));

    let (l, g) = weighted_bce_logit(&gather(raw, MASK..MASK + 1), &gather(target, MASK..MASK + 1), &ones[..n * hw])?;
    loss.mask = l;
    scatter(&mut grad, MASK..MASK + 1, &g);

    // Normals: n = z/max(|z|, eps) per pixel, gradient projected off n once
    // |z| clears eps. The linear region below eps lets zero-initialized
    // heads leave the origin, where z/|z| has no usable gradient.
    let z = gather(raw, NORMAL..NORMAL + 3);
    let mut nrm = vec![T::zero(); z.len()];
    let mut inv_len = vec![0.0; n * hw];
    for s in 0..n {
        for i in 0..hw {
            let idx = |k: usize| (s * 3 + k) * hw + i;
            let v = DVec3::new(z[idx(0)].f64(), z[idx(1)].f64(), z[idx(2)].f64());
            let il = 1.0 / v.length().max(NORMAL_EPS);
            inv_len[s * hw + i] = il;
            for k in 0..3 {
                nrm[idx(k)] = T::of(v[k] * il);
            }
        }
    }
    let (l, gn) = weighted_l1(&nrm, &gather(target, NORMAL..NORMAL + 3), &mask_of(3))?;
    loss.normal = l;
    let mut gz = vec![T::zero(); z.len()];
    for s in 0..n {
        for i in 0..hw {
            let il = inv_len[s * hw + i];
            let idx = |k: usize| (s * 3 + k) * hw + i;
            let nv = DVec3::new(nrm[idx(0)].f64(), nrm[idx(1)].f64(), nrm[idx(2)].f64());
            let gv = DVec3::new(gn[idx(0)].f64(), gn[idx(1)].f64(), gn[idx(2)].f64());
            let d = if il < 1.0 / NORMAL_EPS { (gv - nv * nv.dot(gv)) * il } else { gv * il };
            for k in 0..3 {
                gz[idx(k)] = T::of(d[k]);
            }
        }
    }
    scatter(&mut grad, NORMAL..NORMAL + 3, &gz);
    Ok((loss, grad))
}

/// Masked mean of |albedo − target| over channels and the mean angular
/// normal error in degrees, both over pixels covered by `reference`.
pub fn gbuffer_errors(pred: &GBuffer, reference: &GBuffer) -> (f64, f64) {
    let (mut l1, mut ang, mut n) = (0.0, 0.0, 0usize);
    for i in 0..reference.len() {
        if !reference.covered(i) {
            continue;
        }
        l1 += (pred.albedo[i] - reference.albedo[i]).abs().element_sum() / 3.0;
        ang += pred.normal[i].dot(reference.normal[i]).clamp(-1.0, 1.0).acos().to_degrees();
        n += 1;
    }
    let n = n.max(1) as f64;
    (l1 / n, ang / n)
}

/// Period-2 detector. The plane's deviation from its 3×3 neighbourhood mean
/// is transformed along x (and along y); the spectral magnitude on the
/// Nyquist line, pooled over every frequency of the other axis, is divided
/// by the mean magnitude of the two adjacent lines. The larger of the two
/// axis ratios is returned; values above 2 indicate a checkerboard.
pub fn nyquist_spike(plane: &[f64], w: usize, h: usize) -> f64 {
    let at = |x: isize, y: isize| plane[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut dev = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    m += at(x + dx, y + dy);
                }
            }
            dev[y as usize * w + x as usize] = at(x, y) - m / 9.0;
        }
    }
    // Σ over the other axis of |DFT|² equals (by Parseval) the line energy.
    let line = |k: usize, along_x: bool| -> f64 {
        let (n, m) = if along_x { (w, h) } else { (h, w) };
        let mut e = 0.0;
        for j in 0..m {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let v = if along_x { dev[j * w + i] } else { dev[i * w + j] };
                let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            e += re * re + im * im;
        }
        e.sqrt()
    };
    let floor = 1e-9 * plane.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    let mut worst: f64 = 0.0;
    for (n, along_x) in [(w, true), (h, false)] {
        let k = n / 2;
        let peak = line(k, along_x);
        let neigh = 0.5 * (line(k - 1, along_x) + line(k + 1, along_x));
        worst = worst.max(peak / neigh.max(floor));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(DVec3::new(0.0, 0.3, 2.0), DVec3::ZERO, DVec3::Y, 40.0, w, h).unwrap()
    }

    fn unit_box() -> Aabb {
        Aabb {
            min: DVec3::splat(-1.0),
            max: DVec3::splat(1.0),
        }
    }

    #[test]
    fn raymap_shape_and_channels() {
        let cam = camera(128, 128);
        let m = build_raymap::<f64>(&cam, 8).unwrap();
        assert_eq!(m.shape, vec![1, 6, 16, 16]);
        assert!(m.plane(0, 1).iter().all(|v| *v == 0.3));
        for i in 0..256 {
            let d = DVec3::new(m.plane(0, 3)[i], m.plane(0, 4)[i], m.plane(0, 5)[i]);
            assert!((d.length() - 1.0).abs() < 1e-5);
        }
        assert!(matches!(build_raymap::<f32>(&camera(100, 128), 8), Err(Error::Indivisible(100, 128, 8))));
    }

    #[test]
    fn raymap_centre_looks_at_target() {
        // Odd downsampled size so a pixel centre sits on the optical axis.
        let cam = camera(72, 72);
        let m = build_raymap::<f64>(&cam, 8).unwrap();
        let i = 4 * 9 + 4;
        let d = DVec3::new(m.plane(0, 3)[i], m.plane(0, 4)[i], m.plane(0, 5)[i]);
        let axis = (cam.look_at - cam.position).normalize();
        assert!((d - axis).length() < 1e-4);
    }

    #[test]
    fn zero_heads_give_flat_maps() {
        let model = DirectRenderer::<f32>::new(CnnConfig::desk(), unit_box(), 1);
        let gb = &model.forward_gbuffer(&[camera(64, 64)]).unwrap()[0];
        assert_eq!((gb.width, gb.height), (64, 64));
        for i in 0..gb.len() {
            assert_eq!(gb.albedo[i], DVec3::splat(0.5));
            assert_eq!(gb.normal[i], DVec3::ZERO);
            assert_eq!(gb.mask[i], 0.5);
            assert!((gb.roughness[i] - 0.545).abs() < 1e-12);
            assert_eq!(gb.coord[i], DVec3::ZERO);
        }
    }

    #[test]
    fn output_is_eight_times_input() {
        let model = DirectRenderer::<f32>::new(CnnConfig::desk(), unit_box(), 1);
        let y = model.infer(&Tensor::zeros(&[2, 6, 16, 16])).unwrap();
        assert_eq!(y.shape, vec![2, 11, 128, 128]);
    }

    #[test]
    fn trunk_cost_closed_form() {
        let cfg = CnnConfig {
            stem_channels: 4,
            trunk_depth: 1,
            sr_channels: vec![4],
            transposed_upsampler: false,
        };
        let mut m = DirectRenderer::<f32>::new(cfg, unit_box(), 0);
        let c = m.count_forward_cost(2, 2);
        assert_eq!(c.trunk_macs, 64);
        assert_eq!(c.stem_macs, 6 * 4 * 4);
    }

    #[test]
    fn halving_widths_quarters_parameters() {
        let mut full = DirectRenderer::<f32>::new(CnnConfig::full(), unit_box(), 0);
        let mut half = DirectRenderer::<f32>::new(CnnConfig::full().halved(), unit_box(), 0);
        let ratio = half.count_forward_cost(16, 16).params as f64 / full.count_forward_cost(16, 16).params as f64;
        assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn parameter_count_matches_checkpoint() {
        let mut m = DirectRenderer::<f32>::new(CnnConfig::desk(), unit_box(), 0);
        let mut ck = Checkpoint::new("");
        ck.add_module("", &mut m);
        let n: usize = ck.tensors.iter().map(|t| t.2.len()).sum();
        assert_eq!(n as u64, m.count_forward_cost(16, 16).params);
    }

    #[test]
    fn output_skip_is_additive() {
        let cfg = CnnConfig {
            stem_channels: 8,
            trunk_depth: 2,
            sr_channels: vec![8, 4, 4],
            transposed_upsampler: false,
        };
        let mut m = DirectRenderer::<f64>::new(cfg, unit_box(), 3);
        m.randomize(4);
        m.zero_heads_from(1);
        let x = build_raymap::<f64>(&camera(32, 32), 8).unwrap();
        let y = m.infer(&x).unwrap();
        let h1 = m.blocks[0].infer(&m.trunk.iter().fold(m.stem.infer(&x).unwrap(), |h, l| h.add(&l.infer(&h).unwrap()).unwrap())).unwrap().1;
        let expect = upsample2x(&upsample2x(&h1).unwrap()).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let mut a = DirectRenderer::<f32>::new(CnnConfig::desk().halved(), unit_box(), 5);
        a.randomize(6);
        a.save(&p, serde_json::Value::Null).unwrap();
        let (b, _) = DirectRenderer::<f32>::load(&p).unwrap();
        let cams = [camera(32, 32)];
        assert_eq!(a.forward_gbuffer(&cams).unwrap(), b.forward_gbuffer(&cams).unwrap());
    }

    #[test]
    fn nyquist_metric_flags_checkerboard() {
        let (w, h) = (32, 32);
        let smooth: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - 15.5, (i / w) as f64 - 15.5);
                (-(x * x + y * y) / 50.0).exp()
            })
            .collect();
        let r = nyquist_spike(&smooth, w, h);
        assert!(r <= 2.0, "{r}");
        let checker: Vec<f64> = smooth.iter().enumerate().map(|(i, v)| v + 0.1 * (((i % w) + i / w) % 2) as f64).collect();
        assert!(nyquist_spike(&checker, w, h) > 10.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = init_rng(8);
        let shape = [2, 11, 3, 3];
        let raw = Tensor::<f64>::from_vec(&shape, (0..198).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let mut target = Tensor::<f64>::from_vec(&shape, (0..198).map(|_| rng.random::<f64>()).collect()).unwrap();
        for s in 0..2 {
            for i in 0..9 {
                target.data[(s * 11 + MASK) * 9 + i] = ((s + i) % 2) as f64;
            }
        }
        let (_, g) = cnn_loss(&raw, &target).unwrap();
        let h = 1e-6;
        for i in 0..raw.len() {
            let mut p = raw.clone();
            p.data[i] += h;
            let mut m = raw.clone();
            m.data[i] -= h;
            let num = (cnn_loss(&p, &target).unwrap().0.total() - cnn_loss(&m, &target).unwrap().0.total()) / (2.0 * h);
            assert!((num - g.data[i]).abs() < 1e-6, "{i}: {num} vs {}", g.data[i]);
        }
    }
}
