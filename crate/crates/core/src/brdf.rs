//! Simplified Disney BRDF: a Lambertian diffuse lobe plus a GGX specular lobe
//! with Schlick Fresnel and height-correlated Smith masking-shadowing, and
//! the visible-normal (VNDF) importance sampler for the specular lobe.

use glam::DVec3;
use std::f64::consts::PI;

use crate::geom::{build_onb, reflect};
use crate::{Error, Result};

pub const ROUGHNESS_MIN: f64 = 0.09;
pub const ROUGHNESS_MAX: f64 = 1.0;
/// Fixed dielectric reflectance at normal incidence.
pub const F0: f64 = 0.04;

/// Per-point shading parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfParams {
    pub albedo: DVec3,
    pub roughness: f64,
    pub normal: DVec3,
}

impl BrdfParams {
    /// Clamps albedo and roughness into their valid ranges.
    pub fn new(albedo: DVec3, roughness: f64, normal: DVec3) -> BrdfParams {
        BrdfParams {
            albedo: albedo.clamp(DVec3::ZERO, DVec3::ONE),
            roughness: roughness.clamp(ROUGHNESS_MIN, ROUGHNESS_MAX),
            normal,
        }
    }

    /// GGX width `roughness^2`. Not clamped, so hand-built parameters can
    /// probe the smooth limit.
    #[inline]
    pub fn alpha(&self) -> f64 {
        self.roughness * self.roughness
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecularConstants {
    pub f0: f64,
    /// `roughness^2`, the GGX width.
    pub alpha: f64,
    /// `alpha^2`; only the separable Schlick-Smith form uses it.
    pub k: f64,
}

/// Which lobes to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Lobes {
    #[default]
    Full,
    DiffuseOnly,
    SpecularOnly,
}

fn constants(r: f64) -> SpecularConstants {
    let alpha = r * r;
    SpecularConstants {
        f0: F0,
        alpha,
        k: alpha * alpha,
    }
}

/// Tolerant remap: out-of-range roughness is clamped with a warning.
pub fn remap_roughness(r: f64) -> SpecularConstants {
    if !(ROUGHNESS_MIN..=ROUGHNESS_MAX).contains(&r) {
        log::warn!("roughness {r} clamped to [{ROUGHNESS_MIN}, {ROUGHNESS_MAX}]");
    }
    constants(r.clamp(ROUGHNESS_MIN, ROUGHNESS_MAX))
}

pub fn remap_roughness_strict(r: f64) -> Result<SpecularConstants> {
    if !(ROUGHNESS_MIN..=ROUGHNESS_MAX).contains(&r) {
        return Err(Error::RoughnessOutOfRange(r));
    }
    Ok(constants(r))
}

/// GGX normal distribution `D(h)`.
#[inline]
pub fn ggx_ndf(cos_nh: f64, alpha: f64) -> f64 {
    if cos_nh < 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let d = cos_nh * cos_nh * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// Smith `Lambda` for GGX.
#[inline]
pub fn smith_lambda(cos_theta: f64, alpha: f64) -> f64 {
    let c2 = cos_theta * cos_theta;
    let tan2 = ((1.0 - c2) / c2).max(0.0);
    0.5 * ((1.0 + alpha * alpha * tan2).sqrt() - 1.0)
}

/// Smith masking term for a single direction.
#[inline]
pub fn smith_g1(cos_theta: f64, alpha: f64) -> f64 {
    if cos_theta <= 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + smith_lambda(cos_theta, alpha))
}

/// Height-correlated Smith masking-shadowing `G2`.
#[inline]
pub fn smith_g_correlated(cos_nv: f64, cos_nl: f64, alpha: f64) -> f64 {
    if cos_nv <= 0.0 || cos_nl <= 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + smith_lambda(cos_nv, alpha) + smith_lambda(cos_nl, alpha))
}

/// Separable Schlick-Smith masking-shadowing with the remapped `k`.
pub fn smith_g_separable_schlick(cos_nv: f64, cos_nl: f64, k: f64) -> f64 {
    let g1 = |c: f64| if c <= 0.0 { 0.0 } else { c / (c * (1.0 - k) + k) };
    g1(cos_nv) * g1(cos_nl)
}

#[inline]
pub fn fresnel_schlick(cos_vh: f64, f0: f64) -> f64 {
    let m = (1.0 - cos_vh.clamp(0.0, 1.0)).powi(5);
    f0 + (1.0 - f0) * m
}

/// Specular microfacet term `D F G2 / (4 cos_i cos_o)`.
pub fn eval_specular(p: &BrdfParams, wi: DVec3, wo: DVec3) -> f64 {
    let n = p.normal;
    let (cos_i, cos_o) = (n.dot(wi), n.dot(wo));
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return 0.0;
    }
    let h = (wi + wo).normalize();
    let alpha = p.alpha();
    let d = ggx_ndf(n.dot(h), alpha);
    let f = fresnel_schlick(wo.dot(h), F0);
    let g = smith_g_correlated(cos_o, cos_i, alpha);
    d * f * g / (4.0 * cos_i * cos_o)
}

/// Evaluates `f_r(wi, wo)`; zero when either direction is below the surface.
pub fn eval_brdf(p: &BrdfParams, wi: DVec3, wo: DVec3) -> DVec3 {
    eval_brdf_lobes(p, wi, wo, Lobes::Full)
}

pub fn eval_brdf_lobes(p: &BrdfParams, wi: DVec3, wo: DVec3, lobes: Lobes) -> DVec3 {
    let n = p.normal;
    if n.dot(wi) <= 0.0 || n.dot(wo) <= 0.0 {
        return DVec3::ZERO;
    }
    let diffuse = p.albedo / PI;
    match lobes {
        Lobes::DiffuseOnly => diffuse,
        Lobes::SpecularOnly => DVec3::splat(eval_specular(p, wi, wo)),
        Lobes::Full => diffuse + DVec3::splat(eval_specular(p, wi, wo)),
    }
}

/// Samples an incident direction by reflecting `wo` about a half-vector drawn
/// from the GGX distribution of visible normals. Returns `None` when the
/// reflected direction falls below the surface.
pub fn sample_ggx_vndf(wo: DVec3, p: &BrdfParams, u1: f64, u2: f64) -> Option<(DVec3, f64)> {
    let basis = build_onb(p.normal).ok()?;
    let v = basis.to_local(wo);
    if v.z <= 0.0 {
        return None;
    }
    let alpha = p.alpha();
    let h = sample_visible_normal(v, alpha, u1, u2);
    let wi_local = reflect(v, h);
    if wi_local.z <= 0.0 {
        return None;
    }
    let wi = basis.to_world(wi_local).normalize();
    let pdf = pdf_ggx_vndf(wo, wi, p);
    if pdf > 0.0 {
        Some((wi, pdf))
    } else {
        None
    }
}

/// Visible-normal sampling in the local frame (normal = +z).
fn sample_visible_normal(v: DVec3, alpha: f64, u1: f64, u2: f64) -> DVec3 {
    let vh = DVec3::new(alpha * v.x, alpha * v.y, v.z).normalize();
    let lensq = vh.x * vh.x + vh.y * vh.y;
    let t1 = if lensq > 0.0 {
        DVec3::new(-vh.y, vh.x, 0.0) / lensq.sqrt()
    } else {
        DVec3::X
    };
    let t2 = vh.cross(t1);
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let p1 = r * phi.cos();
    let mut p2 = r * phi.sin();
    let s = 0.5 * (1.0 + vh.z);
    p2 = (1.0 - s) * (1.0 - p1 * p1).max(0.0).sqrt() + s * p2;
    let nh = p1 * t1 + p2 * t2 + (1.0 - p1 * p1 - p2 * p2).max(0.0).sqrt() * vh;
    DVec3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize()
}

/// Solid-angle density of [`sample_ggx_vndf`] producing `wi`.
pub fn pdf_ggx_vndf(wo: DVec3, wi: DVec3, p: &BrdfParams) -> f64 {
    let n = p.normal;
    let (cos_o, cos_i) = (n.dot(wo), n.dot(wi));
    if cos_o <= 0.0 || cos_i <= 0.0 {
        return 0.0;
    }
    vndf_reflection_density(wo, wi, p)
}

/// Density of reflected directions over the whole sphere, including those
/// that end up below the surface. Integrates to one for any `wo` above it.
pub fn vndf_reflection_density(wo: DVec3, wi: DVec3, p: &BrdfParams) -> f64 {
    let n = p.normal;
    let cos_o = n.dot(wo);
    if cos_o <= 0.0 {
        return 0.0;
    }
    let sum = wo + wi;
    if sum.length_squared() < 1e-24 {
        return 0.0;
    }
    let h = sum.normalize();
    let cos_oh = wo.dot(h);
    if cos_oh <= 0.0 {
        return 0.0;
    }
    let alpha = p.alpha();
    // D_visible(h) = G1(wo) D(h) (wo.h) / (n.wo); Jacobian of reflection 1 / (4 wo.h).
    smith_g1(cos_o, alpha) * ggx_ndf(n.dot(h), alpha) / (4.0 * cos_o)
}
