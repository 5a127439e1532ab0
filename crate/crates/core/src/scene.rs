//! Analytic SDF scenes: the teacher that supplies exact surfaces, materials,
//! visibility and secondary depth by sphere tracing.

use glam::DVec3;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::brdf::BrdfParams;
use crate::geom::{Ray, RngStream};
use crate::image::Image;
use crate::{Error, Result};

/// Secondary ray clip range.
pub const NEAR: f64 = 0.05;
pub const FAR: f64 = 1.5;

/// Sphere tracing tolerances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceConfig {
    pub eps_hit: f64,
    pub max_steps: usize,
    pub normal_h: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            eps_hit: 1e-4,
            max_steps: 256,
            normal_h: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: DVec3,
    pub max: DVec3,
}

impl Aabb {
    pub fn empty() -> Aabb {
        Aabb {
            min: DVec3::splat(f64::INFINITY),
            max: DVec3::splat(f64::NEG_INFINITY),
        }
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn center(&self) -> DVec3 {
        0.5 * (self.min + self.max)
    }

    pub fn extent(&self) -> DVec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: DVec3) -> bool {
        p.cmpge(self.min).all() && p.cmple(self.max).all()
    }

    pub fn expanded(&self, m: f64) -> Aabb {
        Aabb {
            min: self.min - DVec3::splat(m),
            max: self.max + DVec3::splat(m),
        }
    }

    /// Slab test; returns the parametric overlap of the ray with the box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let inv = ray.direction.recip();
        let t0 = (self.min - ray.origin) * inv;
        let t1 = (self.max - ray.origin) * inv;
        let tmin = t0.min(t1).max_element();
        let tmax = t0.max(t1).min_element();
        (tmax >= tmin.max(0.0)).then_some((tmin, tmax))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: DVec3, radius: f64 },
    Box { center: DVec3, half_extents: DVec3 },
    Plane { normal: DVec3, offset: f64 },
}

impl Shape {
    #[inline]
    pub fn sdf(&self, x: DVec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (x - center).length() - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let q = (x - center).abs() - half_extents;
                q.max(DVec3::ZERO).length() + q.max_element().min(0.0)
            }
            Shape::Plane { normal, offset } => normal.dot(x) - offset,
        }
    }

    pub fn bounds(&self) -> Option<Aabb> {
        match *self {
            Shape::Sphere { center, radius } => Some(Aabb {
                min: center - DVec3::splat(radius),
                max: center + DVec3::splat(radius),
            }),
            Shape::Box {
                center,
                half_extents,
            } => Some(Aabb {
                min: center - half_extents,
                max: center + half_extents,
            }),
            Shape::Plane { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Material {
    Uniform {
        albedo: DVec3,
        roughness: f64,
    },
    Checker {
        albedo_a: DVec3,
        albedo_b: DVec3,
        scale: f64,
        roughness: f64,
    },
}

impl Material {
    pub fn at(&self, x: DVec3, normal: DVec3) -> BrdfParams {
        match *self {
            Material::Uniform { albedo, roughness } => BrdfParams::new(albedo, roughness, normal),
            Material::Checker {
                albedo_a,
                albedo_b,
                scale,
                roughness,
            } => {
                let c = (x / scale).floor();
                let parity = (c.x + c.y + c.z).rem_euclid(2.0) < 0.5;
                BrdfParams::new(if parity { albedo_a } else { albedo_b }, roughness, normal)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

/// Counters for diagnosing tracer behaviour; shared across worker threads.
#[derive(Debug, Default)]
pub struct TraceStats {
    pub traces: AtomicU64,
    pub exhausted: AtomicU64,
}

#[derive(Debug)]
pub struct SdfScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub aabb: Aabb,
    pub camera_radius: f64,
    pub fov_deg: f64,
    pub elevation_deg: (f64, f64),
    pub trace: TraceConfig,
    pub stats: TraceStats,
}

impl Clone for SdfScene {
    fn clone(&self) -> Self {
        SdfScene {
            name: self.name.clone(),
            primitives: self.primitives.clone(),
            aabb: self.aabb,
            camera_radius: self.camera_radius,
            fov_deg: self.fov_deg,
            elevation_deg: self.elevation_deg,
            trace: self.trace,
            stats: TraceStats::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TraceResult {
    pub hit: bool,
    pub x: DVec3,
    pub t: f64,
    pub n: DVec3,
    pub material: Option<BrdfParams>,
    pub steps: usize,
}

impl TraceResult {
    fn miss(t: f64, steps: usize) -> TraceResult {
        TraceResult {
            hit: false,
            x: DVec3::ZERO,
            t,
            n: DVec3::ZERO,
            material: None,
            steps,
        }
    }
}

/// Hard visibility and clipped secondary depth for one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilitySample {
    pub visible: bool,
    pub t: f64,
}

impl VisibilitySample {
    pub fn v(&self) -> f64 {
        if self.visible {
            1.0
        } else {
            0.0
        }
    }
}

impl SdfScene {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>) -> SdfScene {
        let aabb = primitives
            .iter()
            .filter_map(|p| p.shape.bounds())
            .fold(Aabb::empty(), |a, b| a.union(&b));
        let radius = if aabb.min.is_finite() {
            0.5 * aabb.extent().length()
        } else {
            1.0
        };
        SdfScene {
            name: name.into(),
            primitives,
            aabb,
            camera_radius: 3.0 * radius.max(0.5),
            fov_deg: 40.0,
            elevation_deg: (5.0, 75.0),
            trace: TraceConfig::default(),
            stats: TraceStats::default(),
        }
    }

    pub fn center(&self) -> DVec3 {
        self.aabb.center()
    }

    /// Signed distance to the union of all primitives.
    #[inline]
    pub fn sdf(&self, x: DVec3) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.shape.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance and index of the closest primitive.
    #[inline]
    pub fn nearest(&self, x: DVec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.primitives.iter().enumerate() {
            let d = p.shape.sdf(x);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Central-difference SDF gradient.
    pub fn normal(&self, x: DVec3) -> DVec3 {
        let h = self.trace.normal_h;
        let g = DVec3::new(
            self.sdf(x + DVec3::X * h) - self.sdf(x - DVec3::X * h),
            self.sdf(x + DVec3::Y * h) - self.sdf(x - DVec3::Y * h),
            self.sdf(x + DVec3::Z * h) - self.sdf(x - DVec3::Z * h),
        );
        g.normalize_or_zero()
    }

    /// Material and normal at a surface point.
    pub fn material_at(&self, x: DVec3) -> BrdfParams {
        let (_, i) = self.nearest(x);
        self.primitives[i].material.at(x, self.normal(x))
    }

    pub fn sphere_trace(
        &self,
        ray: &Ray,
        t_min: f64,
        t_max: f64,
        eps: f64,
        max_steps: usize,
    ) -> TraceResult {
        self.stats.traces.fetch_add(1, Ordering::Relaxed);
        let (mut t, mut t_end) = (t_min, t_max);
        if self.aabb.min.is_finite() {
            match self.aabb.expanded(4.0 * eps).intersect(ray) {
                Some((t0, t1)) => {
                    t = t.max(t0);
                    t_end = t_end.min(t1);
                }
                None => return TraceResult::miss(t_max, 0),
            }
        }
        for step in 0..max_steps {
            if t > t_end {
                return TraceResult::miss(t_max, step);
            }
            let x = ray.at(t);
            let d = self.sdf(x);
            if d < eps {
                let n = self.normal(x);
                let (_, i) = self.nearest(x);
                return TraceResult {
                    hit: true,
                    x,
                    t,
                    n,
                    material: Some(self.primitives[i].material.at(x, n)),
                    steps: step + 1,
                };
            }
            t += d;
        }
        self.stats.exhausted.fetch_add(1, Ordering::Relaxed);
        TraceResult::miss(t_max, max_steps)
    }

    /// Traces with the scene's configured tolerances.
    pub fn trace(&self, ray: &Ray, t_min: f64, t_max: f64) -> TraceResult {
        self.sphere_trace(ray, t_min, t_max, self.trace.eps_hit, self.trace.max_steps)
    }

    /// Hit test along `wi` from surface point `x`, starting `near` away from
    /// the surface. Occluded rays report the clipped hit distance; visible
    /// rays report `far`.
    pub fn visibility_depth(&self, x: DVec3, wi: DVec3, near: f64, far: f64) -> VisibilitySample {
        self.visibility_depth_steps(x, wi, near, far, self.trace.max_steps)
    }

    pub fn visibility_depth_steps(
        &self,
        x: DVec3,
        wi: DVec3,
        near: f64,
        far: f64,
        max_steps: usize,
    ) -> VisibilitySample {
        let ray = Ray {
            origin: x + near * wi,
            direction: wi,
        };
        let r = self.sphere_trace(&ray, 0.0, far - near, self.trace.eps_hit, max_steps);
        if r.hit {
            VisibilitySample {
                visible: false,
                t: (r.t + near).clamp(near, far),
            }
        } else {
            VisibilitySample { visible: true, t: far }
        }
    }

    /// Primary ray range for a camera: up to the far side of the bounds.
    pub fn primary_far(&self, camera: &Camera) -> f64 {
        let r = if self.aabb.min.is_finite() {
            0.5 * self.aabb.extent().length()
        } else {
            100.0
        };
        (camera.position - self.center()).length() + r
    }

    pub fn trace_gbuffer(&self, camera: &Camera) -> GBuffer {
        let (w, h) = (camera.width, camera.height);
        let far = self.primary_far(camera);
        let rows: Vec<Vec<GPixel>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let ray = camera.pixel_ray(x, y);
                        let r = self.trace(&ray, 0.0, far);
                        match r.material {
                            Some(m) if r.hit => GPixel {
                                albedo: m.albedo,
                                roughness: m.roughness,
                                normal: r.n,
                                coord: r.x,
                                mask: 1.0,
                                depth: r.t,
                            },
                            _ => GPixel::background(&ray, far),
                        }
                    })
                    .collect()
            })
            .collect();
        GBuffer::from_pixels(w, h, rows.into_iter().flatten())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SdfScene> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SdfScene::parse(&text, path)
    }

    /// Parses the flat `key = value` scene format. Global keys come first,
    /// then one `[sphere]`, `[box]` or `[plane]` section per primitive.
    pub fn parse(text: &str, path: &Path) -> Result<SdfScene> {
        let err = |line: usize, m: String| Error::parse(path, format!("line {line}: {m}"));
        let mut globals: Vec<(usize, String, String)> = Vec::new();
        let mut sections: Vec<(usize, String, Vec<(usize, String, String)>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let kind = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(lineno, "unterminated section".into()))?;
                sections.push((lineno, kind.trim().to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected key = value, got {line:?}")))?;
            let entry = (lineno, k.trim().to_string(), v.trim().to_string());
            match sections.last_mut() {
                Some((_, _, kv)) => kv.push(entry),
                None => globals.push(entry),
            }
        }
        let floats = |line: usize, v: &str, n: usize| -> Result<Vec<f64>> {
            let xs: Vec<f64> = v
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(line, format!("bad number in {v:?}")))?;
            if xs.len() != n {
                return Err(err(line, format!("expected {n} numbers, got {}", xs.len())));
            }
            Ok(xs)
        };
        let vec3 = |line: usize, v: &str| -> Result<DVec3> {
            let x = floats(line, v, 3)?;
            Ok(DVec3::new(x[0], x[1], x[2]))
        };

        let mut primitives = Vec::new();
        for (lineno, kind, kv) in &sections {
            let get = |key: &str| kv.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
            let need = |key: &str| get(key).ok_or_else(|| err(*lineno, format!("[{kind}] missing {key}")));
            for (l, k, _) in kv {
                let known = [
                    "center", "radius", "half_extents", "normal", "offset", "albedo", "roughness",
                    "checker_a", "checker_b", "checker_scale",
                ];
                if !known.contains(&k.as_str()) {
                    return Err(err(*l, format!("unknown key {k:?} in [{kind}]")));
                }
            }
            let shape = match kind.as_str() {
                "sphere" => {
                    let (l, c) = need("center")?;
                    let (lr, r) = need("radius")?;
                    let radius = floats(lr, r, 1)?[0];
                    if radius <= 0.0 {
                        return Err(err(lr, "radius must be positive".into()));
                    }
                    Shape::Sphere {
                        center: vec3(l, c)?,
                        radius,
                    }
                }
                "box" => {
                    let (l, c) = need("center")?;
                    let (lh, h) = need("half_extents")?;
                    Shape::Box {
                        center: vec3(l, c)?,
                        half_extents: vec3(lh, h)?,
                    }
                }
                "plane" => {
                    let (l, n) = need("normal")?;
                    let (lo, o) = need("offset")?;
                    let normal = vec3(l, n)?;
                    if normal.length() < 1e-12 {
                        return Err(err(l, "zero plane normal".into()));
                    }
                    Shape::Plane {
                        normal: normal.normalize(),
                        offset: floats(lo, o, 1)?[0],
                    }
                }
                other => return Err(err(*lineno, format!("unknown primitive {other:?}"))),
            };
            let roughness = match get("roughness") {
                Some((l, v)) => floats(l, v, 1)?[0],
                None => 0.5,
            };
            let material = if let Some((l, a)) = get("checker_a") {
                let (lb, b) = need("checker_b")?;
                let (ls, s) = need("checker_scale")?;
                Material::Checker {
                    albedo_a: vec3(l, a)?,
                    albedo_b: vec3(lb, b)?,
                    scale: floats(ls, s, 1)?[0],
                    roughness,
                }
            } else {
                let (l, a) = need("albedo")?;
                Material::Uniform {
                    albedo: vec3(l, a)?,
                    roughness,
                }
            };
            primitives.push(Primitive { shape, material });
        }
        if primitives.is_empty() {
            return Err(Error::parse(path, "scene has no primitives"));
        }

        let mut scene = SdfScene::new("scene", primitives);
        for (l, k, v) in &globals {
            match k.as_str() {
                "name" => scene.name = v.clone(),
                "camera_radius" => scene.camera_radius = floats(*l, v, 1)?[0],
                "fov" => scene.fov_deg = floats(*l, v, 1)?[0],
                "elevation" => {
                    let e = floats(*l, v, 2)?;
                    scene.elevation_deg = (e[0], e[1]);
                }
                "bounds" => {
                    let b = floats(*l, v, 6)?;
                    scene.aabb = Aabb {
                        min: DVec3::new(b[0], b[1], b[2]),
                        max: DVec3::new(b[3], b[4], b[5]),
                    };
                }
                "max_steps" => scene.trace.max_steps = floats(*l, v, 1)?[0] as usize,
                other => return Err(err(*l, format!("unknown key {other:?}"))),
            }
        }
        if !scene.aabb.min.is_finite() {
            return Err(Error::parse(path, "scene with planes needs explicit bounds"));
        }
        Ok(scene)
    }
}

/// Pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: DVec3,
    pub look_at: DVec3,
    pub up: DVec3,
    pub vfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: DVec3,
        look_at: DVec3,
        up: DVec3,
        vfov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        if !(vfov_deg > 0.0 && vfov_deg < 180.0) {
            return Err(Error::InvalidCamera(format!("fov {vfov_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("empty resolution".into()));
        }
        let forward = look_at - position;
        if forward.length() < 1e-12 || forward.normalize().cross(up).length() < 1e-9 {
            return Err(Error::InvalidCamera("degenerate look-at or up".into()));
        }
        Ok(Camera {
            position,
            look_at,
            up: up.normalize(),
            vfov_deg,
            width,
            height,
        })
    }

    /// (right, up, forward) unit vectors.
    pub fn frame(&self) -> (DVec3, DVec3, DVec3) {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        (right, up, forward)
    }

    /// Ray through continuous image coordinates (pixel units, origin at the
    /// top-left corner).
    pub fn ray_through(&self, px: f64, py: f64) -> Ray {
        let (right, up, forward) = self.frame();
        let tan_half = (0.5 * self.vfov_deg.to_radians()).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * px / self.width as f64 - 1.0) * tan_half * aspect;
        let sy = (1.0 - 2.0 * py / self.height as f64) * tan_half;
        Ray::new(self.position, forward + sx * right + sy * up)
    }

    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray_through(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Camera {
        Camera {
            width,
            height,
            ..*self
        }
    }

    /// Angle between the viewing directions of two cameras around their
    /// look-at points.
    pub fn angular_distance(&self, other: &Camera) -> f64 {
        let a = (self.position - self.look_at).normalize();
        let b = (other.position - other.look_at).normalize();
        a.dot(b).clamp(-1.0, 1.0).acos()
    }
}

/// Draws cameras on the upper hemisphere around a scene centre.
#[derive(Clone, Copy, Debug)]
pub struct PoseSampler {
    pub center: DVec3,
    pub radius: f64,
    /// Elevation range in degrees above the centre's horizontal plane.
    pub elevation_deg: (f64, f64),
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

pub const MAX_POSE_REJECTIONS: usize = 1000;

impl PoseSampler {
    pub fn for_scene(scene: &SdfScene, width: usize, height: usize) -> PoseSampler {
        PoseSampler {
            center: scene.center(),
            radius: scene.camera_radius,
            elevation_deg: scene.elevation_deg,
            fov_deg: scene.fov_deg,
            width,
            height,
        }
    }

    pub fn camera_at(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let dir = DVec3::new(
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
            elevation.cos() * azimuth.cos(),
        );
        Camera::new(
            self.center + self.radius * dir,
            self.center,
            DVec3::Y,
            self.fov_deg,
            self.width,
            self.height,
        )
    }

    /// Uniform over the spherical zone, resampled while closer than
    /// `min_angle` (radians) to any rejected pose.
    pub fn sample(&self, rng: &mut RngStream, reject: &[Camera], min_angle: f64) -> Result<Camera> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidCamera("pose radius must be positive".into()));
        }
        let (lo, hi) = (
            self.elevation_deg.0.to_radians().sin(),
            self.elevation_deg.1.to_radians().sin(),
        );
        for _ in 0..MAX_POSE_REJECTIONS {
            let azimuth = 2.0 * PI * rng.next_f64();
            let elevation = (lo + (hi - lo) * rng.next_f64()).asin();
            let cam = self.camera_at(azimuth, elevation)?;
            if reject.iter().all(|r| cam.angular_distance(r) >= min_angle) {
                return Ok(cam);
            }
        }
        Err(Error::PoseSpaceExhausted(MAX_POSE_REJECTIONS))
    }
}

pub fn sample_hemisphere_pose(
    sampler: &PoseSampler,
    rng: &mut RngStream,
    reject: &[Camera],
    min_angle: f64,
) -> Result<Camera> {
    sampler.sample(rng, reject, min_angle)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GPixel {
    pub albedo: DVec3,
    pub roughness: f64,
    pub normal: DVec3,
    pub coord: DVec3,
    pub mask: f64,
    pub depth: f64,
}

impl GPixel {
    pub fn background(ray: &Ray, far: f64) -> GPixel {
        GPixel {
            albedo: DVec3::ZERO,
            roughness: 1.0,
            normal: DVec3::ZERO,
            coord: ray.at(far),
            mask: 0.0,
            depth: far,
        }
    }
}

/// Per-pixel rendering parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub albedo: Vec<DVec3>,
    pub roughness: Vec<f64>,
    pub normal: Vec<DVec3>,
    pub coord: Vec<DVec3>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

impl GBuffer {
    pub fn from_pixels(width: usize, height: usize, pixels: impl IntoIterator<Item = GPixel>) -> GBuffer {
        let mut g = GBuffer {
            width,
            height,
            albedo: Vec::with_capacity(width * height),
            roughness: Vec::with_capacity(width * height),
            normal: Vec::with_capacity(width * height),
            coord: Vec::with_capacity(width * height),
            mask: Vec::with_capacity(width * height),
            depth: Vec::with_capacity(width * height),
        };
        for p in pixels {
            g.albedo.push(p.albedo);
            g.roughness.push(p.roughness);
            g.normal.push(p.normal);
            g.coord.push(p.coord);
            g.mask.push(p.mask);
            g.depth.push(p.depth);
        }
        assert_eq!(g.mask.len(), width * height);
        g
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> GPixel {
        GPixel {
            albedo: self.albedo[i],
            roughness: self.roughness[i],
            normal: self.normal[i],
            coord: self.coord[i],
            mask: self.mask[i],
            depth: self.depth[i],
        }
    }

    #[inline]
    pub fn covered(&self, i: usize) -> bool {
        self.mask[i] > 0.5
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (w, h) = (self.width, self.height);
        Image::from_rgb(w, h, &self.albedo).write_pfm(dir.join("albedo.pfm"))?;
        Image::from_rgb(w, h, &self.normal).write_pfm(dir.join("normal.pfm"))?;
        Image::from_rgb(w, h, &self.coord).write_pfm(dir.join("coord.pfm"))?;
        Image::from_gray(w, h, &self.roughness).write_pfm(dir.join("roughness.pfm"))?;
        Image::from_gray(w, h, &self.mask).write_pfm(dir.join("mask.pfm"))?;
        Image::from_gray(w, h, &self.depth).write_pfm(dir.join("depth.pfm"))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "width = {w}\nheight = {h}");
        for plane in GBUFFER_PLANES {
            let _ = writeln!(manifest, "plane = {plane}.pfm");
        }
        let path = dir.join("gbuffer.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<GBuffer> {
        let dir = dir.as_ref();
        let albedo = Image::read_pfm(dir.join("albedo.pfm"))?;
        let (w, h) = (albedo.width, albedo.height);
        let load = |name: &str| -> Result<Image> {
            let p = dir.join(format!("{name}.pfm"));
            let img = Image::read_pfm(&p)?;
            if (img.width, img.height) != (w, h) {
                return Err(Error::ShapeMismatch(format!("{}: {}x{} vs {w}x{h}", p.display(), img.width, img.height)));
            }
            Ok(img)
        };
        Ok(GBuffer {
            width: w,
            height: h,
            albedo: albedo.to_rgb(),
            normal: load("normal")?.to_rgb(),
            coord: load("coord")?.to_rgb(),
            roughness: load("roughness")?.to_gray(),
            mask: load("mask")?.to_gray(),
            depth: load("depth")?.to_gray(),
        })
    }
}

pub const GBUFFER_PLANES: [&str; 6] = ["albedo", "normal", "coord", "roughness", "mask", "depth"];
