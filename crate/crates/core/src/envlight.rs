//! Equirectangular environment lighting.
//!
//! Direction convention: y is up, `theta = acos(d.y)` is measured from +y and
//! `phi = atan2(d.x, -d.z)` from -z, wrapped to `[0, 2 pi)`. Texture
//! coordinates are `u = phi / 2 pi`, `v = theta / pi`, so row 0 is the
//! zenith.

use glam::DVec3;
use std::f64::consts::PI;
use std::path::Path;

use crate::image::Image;
use crate::{luminance, Error, Result};

/// Floor on `sin(theta)` in the sampling weights.
pub const SIN_THETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EnvironmentMap {
    width: usize,
    height: usize,
    pixels: Vec<DVec3>,
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize, pixels: Vec<DVec3>) -> Result<EnvironmentMap> {
        if width == 0 || height == 0 || width != 2 * height {
            return Err(Error::InvalidEnvironment(format!(
                "expected width = 2 x height, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidEnvironment("pixel count mismatch".into()));
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite() || p.min_element() < 0.0) {
            return Err(Error::InvalidEnvironment(format!("invalid radiance {p}")));
        }
        Ok(EnvironmentMap {
            width,
            height,
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, value: DVec3) -> Result<EnvironmentMap> {
        EnvironmentMap::new(width, height, vec![value; width * height])
    }

    pub fn from_image(img: &Image) -> Result<EnvironmentMap> {
        EnvironmentMap::new(img.width, img.height, img.to_rgb())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EnvironmentMap> {
        EnvironmentMap::from_image(&Image::read_pfm(path)?)
    }

    pub fn to_image(&self) -> Image {
        Image::from_rgb(self.width, self.height, &self.pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> DVec3 {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[DVec3] {
        &self.pixels
    }

    /// Returns a copy with every pixel multiplied by `s`.
    pub fn scaled(&self, s: f64) -> EnvironmentMap {
        EnvironmentMap {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| *p * s).collect(),
        }
    }

    /// Bilinear lookup with horizontal wrap and vertical clamp.
    pub fn sample_radiance(&self, d: DVec3) -> DVec3 {
        let (u, v) = dir_to_uv(d);
        let x = u * self.width as f64 - 0.5;
        let y = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor();
        let fx = x - x0;
        let y0 = y.floor();
        let fy = y - y0;
        let w = self.width as i64;
        let xa = (x0 as i64).rem_euclid(w) as usize;
        let xb = (x0 as i64 + 1).rem_euclid(w) as usize;
        let ya = y0 as usize;
        let yb = (ya + 1).min(self.height - 1);
        let top = self.pixel(xa, ya) * (1.0 - fx) + self.pixel(xb, ya) * fx;
        let bottom = self.pixel(xa, yb) * (1.0 - fx) + self.pixel(xb, yb) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Exact integral of the piecewise-constant map over the sphere.
    pub fn pixel_integral(&self) -> DVec3 {
        let dphi = 2.0 * PI / self.width as f64;
        (0..self.height)
            .map(|y| {
                let row: DVec3 = (0..self.width).map(|x| self.pixel(x, y)).sum();
                row * dphi * row_band_cos(y, self.height)
            })
            .sum()
    }
}

/// `cos(theta_top) - cos(theta_bottom)` for a row.
fn row_band_cos(row: usize, height: usize) -> f64 {
    let t0 = PI * row as f64 / height as f64;
    let t1 = PI * (row + 1) as f64 / height as f64;
    t0.cos() - t1.cos()
}

pub fn dir_to_uv(d: DVec3) -> (f64, f64) {
    let theta = d.y.clamp(-1.0, 1.0).acos();
    let mut phi = d.x.atan2(-d.z);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let mut u = phi / (2.0 * PI);
    if u >= 1.0 {
        u = 0.0;
    }
    let v = (theta / PI).min(1.0 - f64::EPSILON);
    (u, v)
}

pub fn uv_to_dir(u: f64, v: f64) -> DVec3 {
    let theta = v * PI;
    let phi = u * 2.0 * PI;
    let s = theta.sin();
    DVec3::new(s * phi.sin(), theta.cos(), -s * phi.cos())
}

/// Light importance sampling tables.
///
/// Cell `(x, y)` is drawn with probability proportional to
/// `luminance * sin(theta_row)`, which is proportional to its exact solid
/// angle; inside the cell the direction is uniform in solid angle. The
/// density is therefore piecewise constant over cells.
#[derive(Clone, Debug)]
pub struct LightCdf {
    width: usize,
    height: usize,
    /// Unnormalised cell weights.
    weights: Vec<f64>,
    /// Row CDF, length `height`, last entry 1.
    marginal: Vec<f64>,
    /// Per-row column CDFs, `height x width`.
    conditional: Vec<f64>,
    /// Sum of luminance times cell solid angle.
    total_integral: f64,
    weight_sum: f64,
    cell_solid_angle: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LightSample {
    pub direction: DVec3,
    pub pdf: f64,
    pub radiance: DVec3,
}

impl LightCdf {
    pub fn build(env: &EnvironmentMap) -> Result<LightCdf> {
        let (w, h) = (env.width, env.height);
        let dphi = 2.0 * PI / w as f64;
        let dtheta = PI / h as f64;
        let mut weights = vec![0.0; w * h];
        let mut conditional = vec![0.0; w * h];
        let mut row_sums = vec![0.0; h];
        let mut cell_solid_angle = vec![0.0; h];
        let mut total_integral = 0.0;
        for y in 0..h {
            let theta = (y as f64 + 0.5) * dtheta;
            let sin_t = theta.sin().max(SIN_THETA_FLOOR);
            // Exact band area: 2 sin(theta_c) sin(dtheta / 2) dphi.
            cell_solid_angle[y] = 2.0 * sin_t * (0.5 * dtheta).sin() * dphi;
            let mut acc = 0.0;
            for x in 0..w {
                let lum = luminance(env.pixel(x, y)).max(0.0);
                let wgt = lum * sin_t;
                weights[y * w + x] = wgt;
                total_integral += lum * cell_solid_angle[y];
                acc += wgt;
                conditional[y * w + x] = acc;
            }
            row_sums[y] = acc;
            if acc > 0.0 {
                for c in &mut conditional[y * w..(y + 1) * w] {
                    *c /= acc;
                }
                conditional[y * w + w - 1] = 1.0;
            }
        }
        let weight_sum: f64 = row_sums.iter().sum();
        if !(weight_sum > 0.0) {
            return Err(Error::UnsampleableLight);
        }
        let mut marginal = vec![0.0; h];
        let mut acc = 0.0;
        for y in 0..h {
            acc += row_sums[y];
            marginal[y] = acc / weight_sum;
        }
        marginal[h - 1] = 1.0;
        Ok(LightCdf {
            width: w,
            height: h,
            weights,
            marginal,
            conditional,
            total_integral,
            weight_sum,
            cell_solid_angle,
        })
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn conditional_row(&self, y: usize) -> &[f64] {
        &self.conditional[y * self.width..(y + 1) * self.width]
    }

    pub fn total_integral(&self) -> f64 {
        self.total_integral
    }

    /// Draws a direction; `u1` picks the row, `u2` the column.
    pub fn sample(&self, env: &EnvironmentMap, u1: f64, u2: f64) -> LightSample {
        let (y, fy) = invert_cdf(&self.marginal, u1);
        let (x, fx) = invert_cdf(self.conditional_row(y), u2);
        let h = self.height as f64;
        let cos_top = (PI * y as f64 / h).cos();
        let cos_bottom = (PI * (y + 1) as f64 / h).cos();
        let cos_theta = cos_top + (cos_bottom - cos_top) * fy;
        let phi = 2.0 * PI * (x as f64 + fx) / self.width as f64;
        let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
        let direction = DVec3::new(sin_theta * phi.sin(), cos_theta, -sin_theta * phi.cos());
        LightSample {
            direction,
            pdf: self.cell_pdf(x, y),
            radiance: env.sample_radiance(direction),
        }
    }

    #[inline]
    fn cell_pdf(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x] / self.weight_sum / self.cell_solid_angle[y]
    }

    /// Solid-angle density of [`LightCdf::sample`] at `d`.
    pub fn pdf(&self, d: DVec3) -> f64 {
        let (u, v) = dir_to_uv(d);
        let x = ((u * self.width as f64) as usize).min(self.width - 1);
        let y = ((v * self.height as f64) as usize).min(self.height - 1);
        self.cell_pdf(x, y)
    }
}

/// Finds the bucket containing `u` and the fractional position inside it.
fn invert_cdf(cdf: &[f64], u: f64) -> (usize, f64) {
    let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
    // Skip zero-width buckets that partition_point may land on at exact edges.
    let lo = if i == 0 { 0.0 } else { cdf[i - 1] };
    let width = cdf[i] - lo;
    let frac = if width > 0.0 {
        ((u - lo) / width).clamp(0.0, 1.0 - f64::EPSILON)
    } else {
        0.5
    };
    (i, frac)
}

pub fn build_light_cdf(env: &EnvironmentMap) -> Result<LightCdf> {
    LightCdf::build(env)
}

pub fn sample_light(cdf: &LightCdf, env: &EnvironmentMap, u1: f64, u2: f64) -> LightSample {
    cdf.sample(env, u1, u2)
}

pub fn pdf_light(cdf: &LightCdf, d: DVec3) -> f64 {
    cdf.pdf(d)
}

/// An environment map together with its sampling tables.
#[derive(Clone, Debug)]
pub struct EnvLight {
    pub map: EnvironmentMap,
    pub cdf: LightCdf,
}

impl EnvLight {
    pub fn new(map: EnvironmentMap) -> Result<EnvLight> {
        let cdf = LightCdf::build(&map)?;
        Ok(EnvLight { map, cdf })
    }

    #[inline]
    pub fn radiance(&self, d: DVec3) -> DVec3 {
        self.map.sample_radiance(d)
    }

    #[inline]
    pub fn sample(&self, u1: f64, u2: f64) -> LightSample {
        self.cdf.sample(&self.map, u1, u2)
    }

    #[inline]
    pub fn pdf(&self, d: DVec3) -> f64 {
        self.cdf.pdf(d)
    }
}

/// Procedural sky used for bundled maps: a vertical gradient, a soft sun
/// lobe and a dim ground. All pixels are strictly positive.
pub fn procedural_sky(
    width: usize,
    sun_dir: DVec3,
    sun_color: DVec3,
    sun_sharpness: f64,
    zenith: DVec3,
    horizon: DVec3,
    ground: DVec3,
) -> Result<EnvironmentMap> {
    let height = width / 2;
    let sun_dir = sun_dir.normalize();
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d = uv_to_dir((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let sky = if d.y >= 0.0 {
                horizon.lerp(zenith, d.y.sqrt())
            } else {
                ground.lerp(horizon, (1.0 + d.y).powi(4))
            };
            let sun = sun_color * (sun_sharpness * (d.dot(sun_dir) - 1.0)).exp();
            pixels.push(sky + sun);
        }
    }
    EnvironmentMap::new(width, height, pixels)
}
