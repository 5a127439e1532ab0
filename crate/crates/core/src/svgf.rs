//! Spatial-only variance-guided à-trous filtering.

use glam::DVec3;
use rayon::prelude::*;

use crate::{luminance, Error, Result};

const EPS: f64 = 1e-8;
const KERNEL: [f64; 5] = [1.0 / 16.0, 1.0 / 4.0, 3.0 / 8.0, 1.0 / 4.0, 1.0 / 16.0];
/// Albedo below this is not divided out during demodulation.
const ALBEDO_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvgfConfig {
    pub iterations: usize,
    pub sigma_z: f64,
    pub sigma_n: f64,
    pub sigma_l: f64,
    pub demodulate: bool,
}

impl Default for SvgfConfig {
    fn default() -> Self {
        SvgfConfig {
            iterations: 5,
            sigma_z: 1.0,
            sigma_n: 128.0,
            sigma_l: 4.0,
            demodulate: true,
        }
    }
}

/// Guide buffers. Pixels with `mask == 0` are neither filtered nor used as
/// neighbours.
#[derive(Clone, Copy, Debug)]
pub struct AuxBuffers<'a> {
    pub width: usize,
    pub height: usize,
    pub depth: &'a [f64],
    pub normal: &'a [DVec3],
    pub depth_gradient: &'a [[f64; 2]],
    pub mask: &'a [f64],
    pub albedo: &'a [DVec3],
}

/// Forward differences `(z[x+1]-z[x], z[y+1]-z[y])`; the last column and row
/// repeat their neighbour.
pub fn depth_gradient(depth: &[f64], width: usize, height: usize) -> Vec<[f64; 2]> {
    assert_eq!(depth.len(), width * height);
    let at = |x: usize, y: usize| depth[y * width + x];
    let mut out = vec![[0.0; 2]; width * height];
    for y in 0..height {
        for x in 0..width {
            let gx = if width < 2 {
                0.0
            } else {
                let x0 = x.min(width - 2);
                at(x0 + 1, y) - at(x0, y)
            };
            let gy = if height < 2 {
                0.0
            } else {
                let y0 = y.min(height - 2);
                at(x, y0 + 1) - at(x, y0)
            };
            out[y * width + x] = [gx, gy];
        }
    }
    out
}

/// Unbiased sample variance over the 7×7 window clipped to the image.
pub fn estimate_variance(lum: &[f64], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(lum.len(), width * height);
    let r = 3isize;
    (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (px, py) = ((i % width) as isize, (i / width) as isize);
            let mut n = 0.0;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (px + dx, py + dy);
                    if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                        continue;
                    }
                    let v = lum[y as usize * width + x as usize];
                    n += 1.0;
                    let d = v - mean;
                    mean += d / n;
                    m2 += d * (v - mean);
                }
            }
            if n > 1.0 {
                (m2 / (n - 1.0)).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn check_shapes(frame: &[DVec3], variance: &[f64], aux: &AuxBuffers) -> Result<()> {
    let n = aux.width * aux.height;
    let lens = [
        frame.len(),
        variance.len(),
        aux.depth.len(),
        aux.normal.len(),
        aux.depth_gradient.len(),
        aux.mask.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::ShapeMismatch(format!("svgf buffers {lens:?} for {}x{}", aux.width, aux.height)));
    }
    Ok(())
}

/// One à-trous pass at pixel stride `step`.
fn atrous_pass(frame: &[DVec3], variance: &[f64], aux: &AuxBuffers, cfg: &SvgfConfig, step: isize) -> (Vec<DVec3>, Vec<f64>) {
    let (w, h) = (aux.width as isize, aux.height as isize);
    (0..frame.len())
        .into_par_iter()
        .map(|p| {
            let cp = frame[p];
            if aux.mask[p] <= 0.0 {
                return (cp, variance[p]);
            }
            let (px, py) = ((p % aux.width) as isize, (p / aux.width) as isize);
            let (zp, np, gp) = (aux.depth[p], aux.normal[p], aux.depth_gradient[p]);
            let lp = luminance(cp);
            let lum_scale = cfg.sigma_l * variance[p].max(0.0).sqrt() + EPS;
            let mut wsum = 0.0;
            let mut delta = DVec3::ZERO;
            let mut var = 0.0;
            for (ky, hy) in KERNEL.iter().enumerate() {
                for (kx, hx) in KERNEL.iter().enumerate() {
                    let (ox, oy) = ((kx as isize - 2) * step, (ky as isize - 2) * step);
                    let (qx, qy) = (px + ox, py + oy);
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let q = (qy * w + qx) as usize;
                    if aux.mask[q] <= 0.0 {
                        continue;
                    }
                    let cq = frame[q];
                    let dz = (zp - aux.depth[q]).abs();
                    let wz = (-dz / (cfg.sigma_z * (gp[0] * ox as f64 + gp[1] * oy as f64).abs() + EPS)).exp();
                    let wn = np.dot(aux.normal[q]).max(0.0).powf(cfg.sigma_n);
                    let wl = (-(lp - luminance(cq)).abs() / lum_scale).exp();
                    let wq = hx * hy * wz * wn * wl;
                    wsum += wq;
                    delta += wq * (cq - cp);
                    var += wq * wq * variance[q];
                }
            }
            // The centre tap always has positive weight.
            (cp + delta / wsum, var / (wsum * wsum))
        })
        .unzip()
}

/// Runs `cfg.iterations` passes with strides 1, 2, 4, ...
pub fn atrous_filter(frame: &[DVec3], variance: &[f64], aux: &AuxBuffers, cfg: &SvgfConfig) -> Result<(Vec<DVec3>, Vec<f64>)> {
    check_shapes(frame, variance, aux)?;
    let mut c = frame.to_vec();
    let mut v = variance.to_vec();
    for i in 0..cfg.iterations {
        (c, v) = atrous_pass(&c, &v, aux, cfg, 1 << i);
    }
    Ok((c, v))
}

/// Variance estimate, filtering, and optional albedo demodulation.
pub fn denoise(frame: &[DVec3], aux: &AuxBuffers, cfg: &SvgfConfig) -> Result<Vec<DVec3>> {
    let demod = |i: usize| {
        let a = aux.albedo.get(i).copied().unwrap_or(DVec3::ONE);
        if cfg.demodulate && aux.mask[i] > 0.0 {
            DVec3::select(a.cmpgt(DVec3::splat(ALBEDO_FLOOR)), a, DVec3::ONE)
        } else {
            DVec3::ONE
        }
    };
    if cfg.demodulate && aux.albedo.len() != frame.len() {
        return Err(Error::ShapeMismatch(format!("albedo {} vs frame {}", aux.albedo.len(), frame.len())));
    }
    let input: Vec<DVec3> = frame.iter().enumerate().map(|(i, c)| *c / demod(i)).collect();
    let lum: Vec<f64> = input.iter().map(|c| luminance(*c)).collect();
    let variance = estimate_variance(&lum, aux.width, aux.height);
    let (out, _) = atrous_filter(&input, &variance, aux, cfg)?;
    Ok(out.iter().enumerate().map(|(i, c)| *c * demod(i)).collect())
}
