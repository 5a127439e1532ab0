//! Image quality metrics, display encoding, and latency bookkeeping.

use glam::DVec3;
use std::time::{Duration, Instant};

use crate::integrator::StageTimes;
use crate::{luminance, Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} vs {b} pixels")));
    }
    Ok(())
}

pub fn mse(a: &[DVec3], b: &[DVec3]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::ShapeMismatch("empty images".into()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x - *y).length_squared()).sum();
    Ok(s / (3 * a.len()) as f64)
}

/// Peak signal-to-noise ratio in dB, capped for identical inputs.
pub fn psnr(a: &[DVec3], b: &[DVec3], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable Gaussian blur.
fn blur(img: &[f64], w: usize, h: usize, g: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the Rec.709 luminance of two images with dynamic range 1.
pub fn ssim(a: &[DVec3], b: &[DVec3], width: usize, height: usize) -> Result<f64> {
    same_len(a.len(), b.len())?;
    same_len(a.len(), width * height)?;
    let la: Vec<f64> = a.iter().map(|c| luminance(*c)).collect();
    let lb: Vec<f64> = b.iter().map(|c| luminance(*c)).collect();
    ssim_gray(&la, &lb, width, height)
}

pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    same_len(a.len(), b.len())?;
    if width < SSIM_WIN || height < SSIM_WIN {
        return Err(Error::ImageTooSmall(format!("{width}x{height}"), SSIM_WIN));
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, ow, oh) = blur(a, width, height, &g);
    let (mu_b, ..) = blur(b, width, height, &g);
    let (aa, ..) = blur(&prod(a, a), width, height, &g);
    let (bb, ..) = blur(&prod(b, b), width, height, &g);
    let (ab, ..) = blur(&prod(a, b), width, height, &g);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// sRGB transfer function of a linear value clamped to [0,1].
pub fn srgb_encode(v: f64) -> f64 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn tonemap(v: f64) -> u8 {
    (srgb_encode(v) * 255.0).round() as u8
}

pub fn tonemap_rgb(pixels: &[DVec3]) -> Vec<u8> {
    pixels.iter().flat_map(|p| [tonemap(p.x), tonemap(p.y), tonemap(p.z)]).collect()
}

/// Stage latencies of one frame in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyBreakdown {
    pub model_op_ms: f64,
    pub vis_ms: f64,
    pub render_ms: f64,
    pub dnsr_ms: f64,
    pub total_ms: f64,
    pub fps: f64,
    pub speedup: f64,
}

impl LatencyBreakdown {
    pub fn from_stages(model_op_ms: f64, vis_ms: f64, render_ms: f64, dnsr_ms: f64) -> LatencyBreakdown {
        let total_ms = model_op_ms + vis_ms + render_ms + dnsr_ms;
        LatencyBreakdown {
            model_op_ms,
            vis_ms,
            render_ms,
            dnsr_ms,
            total_ms,
            fps: if total_ms > 0.0 { 1000.0 / total_ms } else { f64::INFINITY },
            speedup: 1.0,
        }
    }

    pub fn with_baseline(mut self, baseline: &LatencyBreakdown) -> LatencyBreakdown {
        self.speedup = baseline.total_ms / self.total_ms;
        self
    }

    pub const CSV_HEADER: &'static str = "label,model_op_ms,vis_ms,render_ms,dnsr_ms,total_ms,fps,speedup,config_hash";

    pub fn csv_row(&self, label: &str, config_hash: &str) -> String {
        format!(
            "{label},{:.3},{:.3},{:.3},{:.3},{:.3},{:.2},{:.2},{config_hash}",
            self.model_op_ms, self.vis_ms, self.render_ms, self.dnsr_ms, self.total_ms, self.fps, self.speedup
        )
    }
}

/// Stage times of one measured frame, denoiser included.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub stages: StageTimes,
    pub dnsr: Duration,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub const MIN_WARMUP: usize = 2;

/// Runs `frame` `warmup` times unmeasured, then `repeats` times, and returns
/// per-stage medians. The total is the sum of the stage medians.
pub fn bench_render<F>(mut frame: F, warmup: usize, repeats: usize) -> Result<LatencyBreakdown>
where
    F: FnMut() -> Result<FrameTiming>,
{
    assert!(repeats >= 1);
    for _ in 0..warmup.max(MIN_WARMUP) {
        frame()?;
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for _ in 0..repeats {
        let t = frame()?;
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        cols[0].push(ms(t.stages.model_op));
        cols[1].push(ms(t.stages.vis));
        cols[2].push(ms(t.stages.render));
        cols[3].push(ms(t.dnsr));
    }
    let [a, b, c, d] = cols.map(|mut v| median(&mut v));
    Ok(LatencyBreakdown::from_stages(a, b, c, d))
}

/// Times a closure, returning its result and the elapsed time.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

/// Least-squares line through `(xs, ys)`; returns (slope, intercept, r²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}
