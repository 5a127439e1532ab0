//! Monte Carlo evaluation of direct lighting with light/GGX multiple
//! importance sampling, and the two-bounce recursion in which occluded
//! (shadow) rays carry the radiance reflected by the surface they hit.
//!
//! Shading is organised as a wavefront over chunks of pixels: sample
//! generation, batched visibility queries, secondary bounces, then
//! accumulation. Every pixel draws from its own keyed stream, so results do
//! not depend on chunking or thread scheduling.

use glam::DVec3;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crate::brdf::{eval_brdf_lobes, pdf_ggx_vndf, sample_ggx_vndf, BrdfParams, Lobes};
use crate::envlight::EnvLight;
use crate::geom::{mix_key, stratified_sphere_dirs, stream_key, Purpose, RngStream};
use crate::scene::{Camera, GBuffer, SdfScene, VisibilitySample, FAR, NEAR};
use crate::svgf::depth_gradient;
use crate::Result;

/// Produces the per-pixel rendering parameters for a view.
pub trait SurfaceProvider: Sync {
    fn surface(&self, camera: &Camera) -> Result<GBuffer>;
}

/// A direction leaving surface point `points[point]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisQuery {
    pub point: u32,
    pub dir: DVec3,
}

/// Hard visibility and secondary depth along directions leaving surfaces.
pub trait VisibilityProvider: Sync {
    fn vis_depth(&self, points: &[DVec3], queries: &[VisQuery]) -> Vec<VisibilitySample>;
}

/// Everything the second bounce needs: visibility plus shading parameters at
/// secondary surface points.
pub trait BounceProvider: VisibilityProvider {
    fn materials(&self, points: &[DVec3]) -> Vec<Option<BrdfParams>>;
}

/// Exact oracles backed by sphere tracing an analytic scene.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub scene: &'a SdfScene,
    pub near: f64,
    pub far: f64,
    pub max_steps: usize,
}

impl<'a> Teacher<'a> {
    pub fn new(scene: &'a SdfScene) -> Teacher<'a> {
        Teacher {
            scene,
            near: NEAR,
            far: FAR,
            max_steps: scene.trace.max_steps,
        }
    }
}

impl SurfaceProvider for Teacher<'_> {
    fn surface(&self, camera: &Camera) -> Result<GBuffer> {
        Ok(self.scene.trace_gbuffer(camera))
    }
}

impl VisibilityProvider for Teacher<'_> {
    fn vis_depth(&self, points: &[DVec3], queries: &[VisQuery]) -> Vec<VisibilitySample> {
        queries
            .iter()
            .map(|q| {
                self.scene
                    .visibility_depth_steps(points[q.point as usize], q.dir, self.near, self.far, self.max_steps)
            })
            .collect()
    }
}

impl BounceProvider for Teacher<'_> {
    fn materials(&self, points: &[DVec3]) -> Vec<Option<BrdfParams>> {
        points.iter().map(|&x| Some(self.scene.material_at(x))).collect()
    }
}

/// Constant visibility, for tests and unshadowed renders.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVisibility {
    pub visible: bool,
    pub far: f64,
}

impl ConstantVisibility {
    pub const ALL_VISIBLE: ConstantVisibility = ConstantVisibility { visible: true, far: FAR };
    pub const ALL_OCCLUDED: ConstantVisibility = ConstantVisibility { visible: false, far: FAR };
}

impl VisibilityProvider for ConstantVisibility {
    fn vis_depth(&self, _points: &[DVec3], queries: &[VisQuery]) -> Vec<VisibilitySample> {
        vec![
            VisibilitySample {
                visible: self.visible,
                t: self.far,
            };
            queries.len()
        ]
    }
}

impl BounceProvider for ConstantVisibility {
    fn materials(&self, points: &[DVec3]) -> Vec<Option<BrdfParams>> {
        vec![None; points.len()]
    }
}

/// Which sampling techniques feed the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// One light sample and one GGX sample per round, balance heuristic.
    #[default]
    Mis,
    LightOnly,
    BrdfOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct ShadeConfig<'a> {
    /// MIS rounds per pixel; each round casts one light and one GGX ray.
    pub spp: usize,
    /// 1 = direct only, 2 = one indirect bounce along shadow rays.
    pub bounces: u8,
    /// Stratified sphere directions per secondary surface point.
    pub secondary_rays: usize,
    pub env: &'a EnvLight,
    pub lobes: Lobes,
    pub strategy: Strategy,
    pub seed: u64,
}

impl<'a> ShadeConfig<'a> {
    pub fn new(env: &'a EnvLight, spp: usize, bounces: u8, seed: u64) -> ShadeConfig<'a> {
        ShadeConfig {
            spp,
            bounces,
            secondary_rays: 8,
            env,
            lobes: Lobes::Full,
            strategy: Strategy::Mis,
            seed,
        }
    }
}

/// A primary surface point ready for shading.
#[derive(Clone, Copy, Debug)]
pub struct ShadingPoint {
    pub x: DVec3,
    pub brdf: BrdfParams,
}

static MIS_DEGENERATE: AtomicU64 = AtomicU64::new(0);
static NON_FINITE: AtomicU64 = AtomicU64::new(0);

/// Number of MIS weights requested with both densities zero.
pub fn mis_degenerate_count() -> u64 {
    MIS_DEGENERATE.load(Ordering::Relaxed)
}

/// Number of non-finite contributions replaced by zero.
pub fn non_finite_count() -> u64 {
    NON_FINITE.load(Ordering::Relaxed)
}

/// Balance heuristic weight of technique `a`.
#[inline]
pub fn mis_weight(pdf_a: f64, pdf_b: f64) -> f64 {
    let sum = pdf_a + pdf_b;
    if sum > 0.0 {
        pdf_a / sum
    } else {
        MIS_DEGENERATE.fetch_add(1, Ordering::Relaxed);
        0.0
    }
}

/// One sampled incident direction at a primary point, before visibility.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    point: u32,
    dir: DVec3,
    /// MIS weight x BRDF x cosine / pdf.
    throughput: DVec3,
    /// Environment radiance along `dir`.
    radiance: DVec3,
}

/// Draws `spp` rounds of samples for one point. Both techniques always
/// consume their random numbers so the stream layout is fixed.
/// Point `k` of the 2D Kronecker sequence built on the plastic number,
/// rotated by `shift` modulo 1.
pub fn r2_point(k: usize, shift: [f64; 2]) -> [f64; 2] {
    const A1: f64 = 0.754_877_666_246_692_8;
    const A2: f64 = 0.569_840_290_998_053_3;
    let k = k as f64;
    [(shift[0] + k * A1).fract(), (shift[1] + k * A2).fract()]
}

fn sample_point(
    point: u32,
    sp: &ShadingPoint,
    wo: DVec3,
    cfg: &ShadeConfig,
    rng: &mut RngStream,
    out: &mut Vec<Candidate>,
) {
    let n = sp.brdf.normal;
    let env = cfg.env;
    // Rounds walk a randomly shifted R2 lattice, one shift per strategy.
    // Every point stays uniform, so the estimator is unbiased, but the
    // rounds stratify each other.
    let light_shift = [rng.next_f64(), rng.next_f64()];
    let brdf_shift = [rng.next_f64(), rng.next_f64()];
    for k in 0..cfg.spp {
        let [u1, u2] = r2_point(k, light_shift);
        let [u3, u4] = r2_point(k, brdf_shift);
        if cfg.strategy != Strategy::BrdfOnly {
            let ls = env.sample(u1, u2);
            let cos = ls.direction.dot(n);
            if cos > 0.0 && ls.pdf > 0.0 {
                let f = eval_brdf_lobes(&sp.brdf, ls.direction, wo, cfg.lobes);
                let w = match cfg.strategy {
                    Strategy::Mis => mis_weight(ls.pdf, pdf_ggx_vndf(wo, ls.direction, &sp.brdf)),
                    _ => 1.0,
                };
                out.push(Candidate {
                    point,
                    dir: ls.direction,
                    throughput: f * (w * cos / ls.pdf),
                    radiance: ls.radiance,
                });
            }
        }
        if cfg.strategy != Strategy::LightOnly {
            if let Some((wi, pdf)) = sample_ggx_vndf(wo, &sp.brdf, u3, u4) {
                let cos = wi.dot(n);
                let f = eval_brdf_lobes(&sp.brdf, wi, wo, cfg.lobes);
                let w = match cfg.strategy {
                    Strategy::Mis => mis_weight(pdf, env.pdf(wi)),
                    _ => 1.0,
                };
                out.push(Candidate {
                    point,
                    dir: wi,
                    throughput: f * (w * cos / pdf),
                    radiance: env.radiance(wi),
                });
            }
        }
    }
}

/// A shadow ray whose radiance comes from the surface it hits.
#[derive(Clone, Copy, Debug)]
struct Bounce {
    candidate: usize,
    /// Secondary surface point `x + t wi`.
    x: DVec3,
    /// Direction from the secondary point back to the primary point.
    wo: DVec3,
    key: u64,
}

/// Outgoing radiance at secondary points toward their primary points,
/// estimated with `secondary_rays` stratified sphere directions of which only
/// forward-facing, unoccluded ones contribute.
fn shade_bounces<P: BounceProvider + ?Sized>(bounces: &[Bounce], cfg: &ShadeConfig, provider: &P) -> Vec<DVec3> {
    if bounces.is_empty() {
        return Vec::new();
    }
    let xs: Vec<DVec3> = bounces.iter().map(|b| b.x).collect();
    let materials = provider.materials(&xs);
    let mut queries = Vec::new();
    let mut owners = Vec::new();
    for (i, (b, m)) in bounces.iter().zip(&materials).enumerate() {
        let Some(m) = m else { continue };
        let mut rng = RngStream::new(cfg.seed, b.key);
        for d in stratified_sphere_dirs(cfg.secondary_rays, &mut rng) {
            if d.dot(m.normal) > 0.0 {
                queries.push(VisQuery { point: i as u32, dir: d });
                owners.push(i);
            }
        }
    }
    let vis = provider.vis_depth(&xs, &queries);
    let mut out = vec![DVec3::ZERO; bounces.len()];
    let scale = 4.0 * PI / cfg.secondary_rays as f64;
    for ((q, v), &i) in queries.iter().zip(&vis).zip(&owners) {
        if !v.visible {
            continue;
        }
        let m = materials[i].as_ref().expect("queried points have materials");
        let f = eval_brdf_lobes(m, q.dir, bounces[i].wo, cfg.lobes);
        out[i] += cfg.env.radiance(q.dir) * f * (q.dir.dot(m.normal) * scale);
    }
    out
}

/// Wall-clock time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub model_op: Duration,
    pub vis: Duration,
    pub render: Duration,
}

impl std::ops::AddAssign for StageTimes {
    fn add_assign(&mut self, o: StageTimes) {
        self.model_op += o.model_op;
        self.vis += o.vis;
        self.render += o.render;
    }
}

/// Query counters for a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShadeCounts {
    pub primary_points: u64,
    pub vis_queries: u64,
    pub bounce_points: u64,
    pub secondary_queries: u64,
    pub non_finite: u64,
}

impl std::ops::AddAssign for ShadeCounts {
    fn add_assign(&mut self, o: ShadeCounts) {
        self.primary_points += o.primary_points;
        self.vis_queries += o.vis_queries;
        self.bounce_points += o.bounce_points;
        self.secondary_queries += o.secondary_queries;
        self.non_finite += o.non_finite;
    }
}

/// Shades a batch of points. `keys` identify each point's random stream.
fn shade_points<P: BounceProvider + ?Sized>(
    points: &[ShadingPoint],
    wos: &[DVec3],
    keys: &[u64],
    cfg: &ShadeConfig,
    provider: &P,
) -> (Vec<DVec3>, StageTimes, ShadeCounts) {
    let mut times = StageTimes::default();
    let mut counts = ShadeCounts {
        primary_points: points.len() as u64,
        ..Default::default()
    };

    let t0 = Instant::now();
    let mut candidates = Vec::with_capacity(points.len() * cfg.spp * 2);
    for (i, ((sp, wo), key)) in points.iter().zip(wos).zip(keys).enumerate() {
        let mut rng = RngStream::new(cfg.seed, stream_key(*key, 0, Purpose::Direct));
        sample_point(i as u32, sp, *wo, cfg, &mut rng, &mut candidates);
    }
    times.render += t0.elapsed();

    let t1 = Instant::now();
    let xs: Vec<DVec3> = points.iter().map(|p| p.x).collect();
    let queries: Vec<VisQuery> = candidates
        .iter()
        .map(|c| VisQuery {
            point: c.point,
            dir: c.dir,
        })
        .collect();
    counts.vis_queries = queries.len() as u64;
    let vis = provider.vis_depth(&xs, &queries);

    let mut incoming: Vec<DVec3> = candidates
        .iter()
        .zip(&vis)
        .map(|(c, v)| if v.visible { c.radiance } else { DVec3::ZERO })
        .collect();
    if cfg.bounces >= 2 {
        let bounces: Vec<Bounce> = candidates
            .iter()
            .zip(&vis)
            .enumerate()
            .filter(|(_, (_, v))| !v.visible)
            .map(|(ci, (c, v))| Bounce {
                candidate: ci,
                x: xs[c.point as usize] + v.t * c.dir,
                wo: -c.dir,
                key: mix_key(&[keys[c.point as usize], ci as u64, Purpose::Indirect as u64]),
            })
            .collect();
        counts.bounce_points = bounces.len() as u64;
        counts.secondary_queries = bounces.len() as u64 * cfg.secondary_rays as u64;
        let radiance = shade_bounces(&bounces, cfg, provider);
        for (b, l) in bounces.iter().zip(radiance) {
            incoming[b.candidate] = l;
        }
    }
    times.vis += t1.elapsed();

    let t2 = Instant::now();
    let mut out = vec![DVec3::ZERO; points.len()];
    for (c, l) in candidates.iter().zip(&incoming) {
        let contrib = c.throughput * *l;
        if contrib.is_finite() {
            out[c.point as usize] += contrib;
        } else {
            NON_FINITE.fetch_add(1, Ordering::Relaxed);
            counts.non_finite += 1;
        }
    }
    let inv = 1.0 / cfg.spp as f64;
    for o in &mut out {
        *o *= inv;
    }
    times.render += t2.elapsed();
    (out, times, counts)
}

/// Direct illumination at one point (visibility only, no bounce).
pub fn direct_radiance<P: VisibilityProvider + ?Sized>(
    point: &ShadingPoint,
    wo: DVec3,
    cfg: &ShadeConfig,
    vis: &P,
    rng: &mut RngStream,
) -> DVec3 {
    if point.brdf.normal.dot(wo) <= 0.0 {
        return DVec3::ZERO;
    }
    let mut candidates = Vec::with_capacity(cfg.spp * 2);
    sample_point(0, point, wo, cfg, rng, &mut candidates);
    let queries: Vec<VisQuery> = candidates.iter().map(|c| VisQuery { point: 0, dir: c.dir }).collect();
    let v = vis.vis_depth(&[point.x], &queries);
    let mut acc = DVec3::ZERO;
    for (c, v) in candidates.iter().zip(&v) {
        if v.visible {
            let contrib = c.throughput * c.radiance;
            if contrib.is_finite() {
                acc += contrib;
            } else {
                NON_FINITE.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
    acc / cfg.spp as f64
}

/// Radiance reflected from the secondary point `x + t wi` back toward `x`.
pub fn indirect_radiance<P: BounceProvider + ?Sized>(
    point: &ShadingPoint,
    wi_shadow: DVec3,
    t: f64,
    cfg: &ShadeConfig,
    provider: &P,
    key: u64,
) -> DVec3 {
    let bounce = Bounce {
        candidate: 0,
        x: point.x + t * wi_shadow,
        wo: -wi_shadow,
        key,
    };
    shade_bounces(&[bounce], cfg, provider)[0]
}

/// A shaded frame plus the auxiliary buffers the denoiser consumes.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub width: usize,
    pub height: usize,
    pub radiance: Vec<DVec3>,
    pub albedo: Vec<DVec3>,
    pub normal: Vec<DVec3>,
    pub depth: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth_gradient: Vec<[f64; 2]>,
    pub times: StageTimes,
    pub counts: ShadeCounts,
}

/// Pixels shaded per work unit.
const CHUNK: usize = 256;

/// Shades the G-buffer a surface provider returns for `camera`.
pub fn shade_frame<S, P>(surface: &S, provider: &P, cfg: &ShadeConfig, camera: &Camera) -> Result<FrameOutput>
where
    S: SurfaceProvider + ?Sized,
    P: BounceProvider + ?Sized,
{
    let t0 = Instant::now();
    let gb = surface.surface(camera)?;
    let model_op = t0.elapsed();
    let mut frame = shade_gbuffer(&gb, provider, cfg, camera);
    frame.times.model_op = model_op;
    Ok(frame)
}

/// Shades an existing G-buffer.
pub fn shade_gbuffer<P: BounceProvider + ?Sized>(
    gb: &GBuffer,
    provider: &P,
    cfg: &ShadeConfig,
    camera: &Camera,
) -> FrameOutput {
    let (w, h) = (gb.width, gb.height);
    let mut radiance = vec![DVec3::ZERO; w * h];
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    let mut wos = Vec::new();
    for i in 0..w * h {
        let ray = camera.pixel_ray(i % w, i / w);
        if !gb.covered(i) {
            radiance[i] = cfg.env.radiance(ray.direction);
            continue;
        }
        let wo = -ray.direction;
        let n = gb.normal[i];
        if n.dot(wo) <= 0.0 || n.length_squared() < 0.5 {
            continue;
        }
        pixels.push(i);
        points.push(ShadingPoint {
            x: gb.coord[i],
            brdf: BrdfParams::new(gb.albedo[i], gb.roughness[i], n),
        });
        wos.push(wo);
    }
    let keys: Vec<u64> = pixels.iter().map(|&p| p as u64).collect();
    let results: Vec<(Vec<DVec3>, StageTimes, ShadeCounts)> = points
        .par_chunks(CHUNK)
        .zip(wos.par_chunks(CHUNK))
        .zip(keys.par_chunks(CHUNK))
        .map(|((p, wo), k)| shade_points(p, wo, k, cfg, provider))
        .collect();
    let mut times = StageTimes::default();
    let mut counts = ShadeCounts::default();
    let mut idx = 0;
    for (vals, t, c) in results {
        times += t;
        counts += c;
        for v in vals {
            radiance[pixels[idx]] = v;
            idx += 1;
        }
    }
    FrameOutput {
        width: w,
        height: h,
        radiance,
        albedo: gb.albedo.clone(),
        normal: gb.normal.clone(),
        depth: gb.depth.clone(),
        mask: gb.mask.clone(),
        depth_gradient: depth_gradient(&gb.depth, w, h),
        times,
        counts,
    }
}

/// Per-channel global scale aligning `pred` with `reference` over the mask.
/// The returned map is `clamp(pred * scale, 0, 1)`.
pub fn albedo_rescale(pred: &[DVec3], reference: &[DVec3], mask: &[f64]) -> Result<(DVec3, Vec<DVec3>)> {
    if pred.len() != reference.len() || pred.len() != mask.len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "albedo maps {} / {} / mask {}",
            pred.len(),
            reference.len(),
            mask.len()
        )));
    }
    let mut sp = DVec3::ZERO;
    let mut sr = DVec3::ZERO;
    for ((p, r), m) in pred.iter().zip(reference).zip(mask) {
        sp += *p * *m;
        sr += *r * *m;
    }
    let mut scale = DVec3::ONE;
    for c in 0..3 {
        if sp[c] > 0.0 {
            scale[c] = sr[c] / sp[c];
        } else {
            log::warn!("albedo channel {c} has zero masked mean; scale left at 1");
        }
    }
    let rescaled = pred.iter().map(|p| (*p * scale).clamp(DVec3::ZERO, DVec3::ONE)).collect();
    Ok((scale, rescaled))
}
