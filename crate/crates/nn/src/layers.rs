use rand::Rng;

use crate::{join, matmul, shape_err, Error, Layer, Module, Param, Real, Result, Tensor};

/// Uniform in ±√(6 / fan_in).
pub fn kaiming_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of((rng.random::<f64>() * 2.0 - 1.0) * bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn take<T>(cache: &mut Option<T>) -> Result<T> {
    cache.take().ok_or(Error::NoForward)
}

/// Output widths below which `Linear::infer` skips gemm.
const NARROW: usize = 4;

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + xa[k] * xb[k];
        }
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear<T> {
        Linear {
            weight: Param::new(kaiming_uniform(rng, &[out_dim, in_dim], in_dim), true),
            bias: Param::new(Tensor::zeros(&[out_dim]), true),
            input: None,
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Linear<T> {
        Linear {
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim]), true),
            bias: Param::new(Tensor::zeros(&[out_dim]), true),
            input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape[0]
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = x.dims2()?;
        let (o, i) = (self.out_dim(), self.in_dim());
        if d != i {
            return Err(shape_err(&[n, i], &x.shape));
        }
        let mut y = Tensor::zeros(&[n, o]);
        for row in y.data.chunks_exact_mut(o) {
            row.copy_from_slice(&self.bias.value.data);
        }
        if o <= NARROW {
            // gemm packing dominates for a handful of outputs.
            for (xr, yr) in x.data.chunks_exact(i).zip(y.data.chunks_exact_mut(o)) {
                for (yv, wr) in yr.iter_mut().zip(self.weight.value.data.chunks_exact(i)) {
                    *yv += dot(xr, wr);
                }
            }
        } else {
            matmul(n, i, o, &x.data, false, &self.weight.value.data, true, &mut y.data, true);
        }
        Ok(y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input)?;
        let (n, i) = x.dims2()?;
        let o = self.out_dim();
        g.expect_shape(&[n, o])?;
        matmul(o, n, i, &g.data, true, &x.data, false, &mut self.weight.grad, true);
        for row in g.data.chunks_exact(o) {
            for (b, v) in self.bias.grad.iter_mut().zip(row) {
                *b += *v;
            }
        }
        let mut dx = Tensor::zeros(&[n, i]);
        matmul(n, o, i, &g.data, false, &self.weight.value.data, false, &mut dx.data, false);
        Ok(dx)
    }
}

/// Stride-1 convolution with odd kernel and same padding, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Conv2d<T> {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: Param::new(kaiming_uniform(rng, &[cout, cin, kernel, kernel], fan_in), true),
            bias: Param::new(Tensor::zeros(&[cout]), true),
            kernel,
            input: None,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, kernel: usize) -> Conv2d<T> {
        Conv2d {
            weight: Param::new(Tensor::zeros(&[cout, cin, kernel, kernel]), true),
            bias: Param::new(Tensor::zeros(&[cout]), true),
            kernel,
            input: None,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape[0]
    }

    /// Multiply-accumulates for one `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.cout() * self.cin() * self.kernel * self.kernel * h * w) as u64
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.cin() {
            return Err(shape_err(&[n, self.cin(), h, w], &x.shape));
        }
        Ok((n, c, h, w))
    }
}

/// Output rows per im2col tile, sized so a tile of patches stays in cache.
fn tile_rows(ckk: usize, h: usize, w: usize) -> usize {
    (TILE_ELEMS / (ckk * w).max(1)).clamp(1, h)
}

const TILE_ELEMS: usize = 1 << 17;

/// Valid `x` range `[lo, hi)` of a row shifted by `dx`.
#[inline]
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds output rows `y0..y1` of one `c×h×w` image into
/// `(c·k·k) × ((y1−y0)·w)` patches.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, (y0, y1): (usize, usize), col: &mut [T]) {
    let r = (k / 2) as isize;
    let (hw, tw) = (h * w, (y1 - y0) * w);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * tw..][..tw];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                let (lo, hi) = valid_span(w, dx);
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    let out = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let s0 = (lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patches back into the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, (y0, y1): (usize, usize), x: &mut [T]) {
    let r = (k / 2) as isize;
    let (hw, tw) = (h * w, (y1 - y0) * w);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * tw..][..tw];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                let (lo, hi) = valid_span(w, dx);
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    for (d, v) in dst.iter_mut().zip(&row[(y - y0) * w + lo..(y - y0) * w + hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.check(x)?;
        let (co, k, hw) = (self.cout(), self.kernel, h * w);
        let ckk = c * k * k;
        let mut y = Tensor::zeros(&[n, co, h, w]);
        let rows = if k == 1 { h } else { tile_rows(ckk, h, w) };
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * rows * w] };
        for b in 0..n {
            let xb = &x.data[b * c * hw..(b + 1) * c * hw];
            let yb = &mut y.data[b * co * hw..(b + 1) * co * hw];
            for (o, plane) in yb.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias.value.data[o]);
            }
            if k == 1 {
                matmul(co, c, hw, &self.weight.value.data, false, xb, false, yb, true);
                continue;
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let tw = (y1 - y0) * w;
                im2col(xb, c, h, w, k, (y0, y1), &mut col);
                // y[:, tile] += W · col, rows of y strided by the plane size.
                T::gemm_raw(
                    co,
                    ckk,
                    tw,
                    &self.weight.value.data,
                    ckk as isize,
                    1,
                    &col[..ckk * tw],
                    tw as isize,
                    1,
                    T::one(),
                    &mut yb[y0 * w..],
                    hw as isize,
                    1,
                );
            }
        }
        Ok(y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input)?;
        let (n, c, h, w) = x.dims4()?;
        let (co, k, hw) = (self.cout(), self.kernel, h * w);
        let ckk = c * k * k;
        g.expect_shape(&[n, co, h, w])?;
        let mut dx = Tensor::zeros(&x.shape);
        let rows = if k == 1 { h } else { tile_rows(ckk, h, w) };
        let mut col = vec![T::zero(); if k == 1 { 0 } else { ckk * rows * w }];
        let mut dcol = vec![T::zero(); if k == 1 { 0 } else { ckk * rows * w }];
        for b in 0..n {
            let xb = &x.data[b * c * hw..(b + 1) * c * hw];
            let gb = &g.data[b * co * hw..(b + 1) * co * hw];
            for (o, plane) in gb.chunks_exact(hw).enumerate() {
                self.bias.grad[o] += plane.iter().copied().sum::<T>();
            }
            let dxb = &mut dx.data[b * c * hw..(b + 1) * c * hw];
            if k == 1 {
                matmul(co, hw, c, gb, false, xb, true, &mut self.weight.grad, true);
                matmul(c, co, hw, &self.weight.value.data, true, gb, false, dxb, false);
                continue;
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let tw = (y1 - y0) * w;
                im2col(xb, c, h, w, k, (y0, y1), &mut col);
                let gt = &gb[y0 * w..];
                // dW += g[:, tile] · colᵀ
                T::gemm_raw(
                    co,
                    tw,
                    ckk,
                    gt,
                    hw as isize,
                    1,
                    &col[..ckk * tw],
                    1,
                    tw as isize,
                    T::one(),
                    &mut self.weight.grad,
                    ckk as isize,
                    1,
                );
                // dcol = Wᵀ · g[:, tile]
                T::gemm_raw(
                    ckk,
                    co,
                    tw,
                    &self.weight.value.data,
                    1,
                    ckk as isize,
                    gt,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcol[..ckk * tw],
                    tw as isize,
                    1,
                );
                col2im(&dcol[..ckk * tw], c, h, w, k, (y0, y1), dxb);
            }
        }
        Ok(dx)
    }
}

/// Kernel 3, stride 2, padding 1, output padding 1 transposed convolution
/// (doubles resolution). Kept to demonstrate its checkerboard artifacts.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Real> {
    /// `[cin, cout, 3, 3]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> ConvTranspose2d<T> {
        ConvTranspose2d {
            weight: Param::new(kaiming_uniform(rng, &[cin, cout, 3, 3], cin * 9), true),
            bias: Param::new(Tensor::zeros(&[cout]), true),
            input: None,
        }
    }

    fn taps(&self, c: usize, co: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        // Output (oy, ox) = (2i − 1 + ky, 2j − 1 + kx).
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for o in 0..co {
                        for ky in 0..3 {
                            let oy = 2 * i + ky;
                            if oy == 0 || oy > 2 * h {
                                continue;
                            }
                            for kx in 0..3 {
                                let ox = 2 * j + kx;
                                if ox == 0 || ox > 2 * w {
                                    continue;
                                }
                                f(ci, i * w + j, o, (oy - 1) * 2 * w + ox - 1, ky * 3 + kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for ConvTranspose2d<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let co = self.weight.value.shape[1];
        if c != self.weight.value.shape[0] {
            return Err(shape_err(&[n, self.weight.value.shape[0], h, w], &x.shape));
        }
        let (hw, ohw) = (h * w, 4 * h * w);
        let mut y = Tensor::zeros(&[n, co, 2 * h, 2 * w]);
        let wt = &self.weight.value.data;
        for b in 0..n {
            let xb = &x.data[b * c * hw..][..c * hw];
            let yb = &mut y.data[b * co * ohw..][..co * ohw];
            for o in 0..co {
                yb[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = self.bias.value.data[o]);
            }
            self.taps(c, co, h, w, |ci, pi, o, po, kk| {
                yb[o * ohw + po] += xb[ci * hw + pi] * wt[(ci * co + o) * 9 + kk];
            });
        }
        Ok(y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input)?;
        let (n, c, h, w) = x.dims4()?;
        let co = self.weight.value.shape[1];
        g.expect_shape(&[n, co, 2 * h, 2 * w])?;
        let (hw, ohw) = (h * w, 4 * h * w);
        let mut dx = Tensor::zeros(&x.shape);
        let wt = self.weight.value.data.clone();
        let mut dw = std::mem::take(&mut self.weight.grad);
        for b in 0..n {
            let xb = &x.data[b * c * hw..][..c * hw];
            let gb = &g.data[b * co * ohw..][..co * ohw];
            for o in 0..co {
                self.bias.grad[o] += gb[o * ohw..(o + 1) * ohw].iter().copied().sum::<T>();
            }
            let dxb = &mut dx.data[b * c * hw..][..c * hw];
            self.taps(c, co, h, w, |ci, pi, o, po, kk| {
                let wi = (ci * co + o) * 9 + kk;
                dxb[ci * hw + pi] += gb[o * ohw + po] * wt[wi];
                dw[wi] += gb[o * ohw + po] * xb[ci * hw + pi];
            });
        }
        self.weight.grad = dw;
        Ok(dx)
    }
}

/// Per-instance, per-channel normalisation with affine scale and shift.
#[derive(Clone, Debug)]
pub struct InstanceNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    /// Normalised input and per-(n, c) inverse standard deviation.
    cache: Option<(Tensor<T>, Vec<f64>)>,
}

impl<T: Real> InstanceNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> InstanceNorm<T> {
        InstanceNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one()), true),
            beta: Param::new(Tensor::zeros(&[channels]), true),
            eps: Self::EPS,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.value.len() {
            return Err(shape_err(&[n, self.gamma.value.len(), h, w], &x.shape));
        }
        let hw = h * w;
        let mut xhat = Tensor::zeros(&x.shape);
        let mut inv = Vec::with_capacity(n * c);
        for (src, dst) in x.data.chunks_exact(hw).zip(xhat.data.chunks_exact_mut(hw)) {
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::of((s.f64() - mean) * is);
            }
            inv.push(is);
        }
        Ok((xhat, inv))
    }

    fn affine(&self, xhat: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = xhat.dims4().expect("checked");
        let hw = h * w;
        let mut y = xhat.clone();
        for (i, plane) in y.data.chunks_exact_mut(hw).enumerate() {
            let (g, b) = (self.gamma.value.data[i % c], self.beta.value.data[i % c]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }
        y
    }
}

impl<T: Real> Module<T> for InstanceNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl<T: Real> Layer<T> for InstanceNorm<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, _) = self.normalize(x)?;
        Ok(self.affine(&xhat))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv) = self.normalize(x)?;
        let y = self.affine(&xhat);
        self.cache = Some((xhat, inv));
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv) = take(&mut self.cache)?;
        g.expect_shape(&xhat.shape)?;
        let (_, c, h, w) = xhat.dims4()?;
        let hw = h * w;
        let mut dx = Tensor::zeros(&xhat.shape);
        for (i, ((gp, xp), dp)) in g
            .data
            .chunks_exact(hw)
            .zip(xhat.data.chunks_exact(hw))
            .zip(dx.data.chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = i % c;
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for (gv, xv) in gp.iter().zip(xp) {
                sg += gv.f64();
                sgx += gv.f64() * xv.f64();
            }
            self.beta.grad[ch] += T::of(sg);
            self.gamma.grad[ch] += T::of(sgx);
            let scale = self.gamma.value.data[ch].f64() * inv[i];
            let (mg, mgx) = (sg / hw as f64, sgx / hw as f64);
            for ((d, gv), xv) in dp.iter_mut().zip(gp).zip(xp) {
                *d = T::of(scale * (gv.f64() - mg - xv.f64() * mgx));
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Gelu<T> {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

/// `x·Φ(x)` with the exact normal CDF.
#[derive(Clone, Debug, Default)]
pub struct Gelu<T: Real> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Gelu<T> {
    pub fn new() -> Gelu<T> {
        Gelu { input: None }
    }
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let h = T::of(0.5);
    h * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Real> Layer<T> for Gelu<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(gelu))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input)?;
        g.expect_shape(&x.shape)?;
        let mut dx = x;
        for (d, gv) in dx.data.iter_mut().zip(&g.data) {
            *d = gelu_grad(*d) * *gv;
        }
        Ok(dx)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T: Real> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Sigmoid<T> {
    pub fn new() -> Sigmoid<T> {
        Sigmoid { output: None }
    }
}

impl<T: Real> Module<T> for Sigmoid<T> {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Layer<T> for Sigmoid<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(sigmoid))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let y = take(&mut self.output)?;
        g.expect_shape(&y.shape)?;
        let mut dx = y;
        for (d, gv) in dx.data.iter_mut().zip(&g.data) {
            *d = *d * (T::one() - *d) * *gv;
        }
        Ok(dx)
    }
}

/// Source taps for output index `o` of a half-pixel ×2 bilinear resample.
#[inline]
fn up_taps(o: usize, len: usize) -> (usize, usize, f64, f64) {
    let i = o / 2;
    let (near, far) = if o % 2 == 0 {
        (i, i.saturating_sub(1))
    } else {
        (i, (i + 1).min(len - 1))
    };
    (near, far, 0.75, 0.25)
}

/// Bilinear ×2 upsampling (half-pixel centres, clamped borders).
#[derive(Clone, Debug, Default)]
pub struct Upsample2x {
    shape: Option<Vec<usize>>,
}

impl Upsample2x {
    pub fn new() -> Upsample2x {
        Upsample2x { shape: None }
    }
}

/// Upsamples an NCHW tensor by two in both axes.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let (q, t) = (T::of(0.75), T::of(0.25));
    for (src, dst) in x.data.chunks_exact(h * w).zip(y.data.chunks_exact_mut(oh * ow)) {
        for oy in 0..oh {
            let (y0, y1, ..) = up_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, ..) = up_taps(ox, w);
                let top = q * src[y0 * w + x0] + t * src[y0 * w + x1];
                let bot = q * src[y1 * w + x0] + t * src[y1 * w + x1];
                dst[oy * ow + ox] = q * top + t * bot;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward<T: Real>(g: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err(&[0, 0, 0, 0], input_shape)),
    };
    let (oh, ow) = (2 * h, 2 * w);
    g.expect_shape(&[n, c, oh, ow])?;
    let mut dx = Tensor::zeros(input_shape);
    let (q, t) = (T::of(0.75), T::of(0.25));
    for (gp, dp) in g.data.chunks_exact(oh * ow).zip(dx.data.chunks_exact_mut(h * w)) {
        for oy in 0..oh {
            let (y0, y1, ..) = up_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, ..) = up_taps(ox, w);
                let v = gp[oy * ow + ox];
                dp[y0 * w + x0] += q * q * v;
                dp[y0 * w + x1] += q * t * v;
                dp[y1 * w + x0] += t * q * v;
                dp[y1 * w + x1] += t * t * v;
            }
        }
    }
    Ok(dx)
}

impl<T: Real> Module<T> for Upsample2x {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

impl<T: Real> Layer<T> for Upsample2x {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        upsample2x(x)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.shape = Some(x.shape.clone());
        upsample2x(x)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take(&mut self.shape)?;
        upsample2x_backward(g, &shape)
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Linear<T>>,
    acts: Vec<Gelu<T>>,
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, hidden.., out]`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Mlp<T> {
        assert!(dims.len() >= 2);
        let layers: Vec<Linear<T>> = dims.windows(2).map(|d| Linear::new(d[0], d[1], rng)).collect();
        let acts = (1..layers.len()).map(|_| Gelu::new()).collect();
        Mlp { layers, acts }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn macs_per_row(&self) -> u64 {
        self.layers.iter().map(|l| (l.in_dim() * l.out_dim()) as u64).sum()
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real> Layer<T> for Mlp<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.layers[0].infer(x)?;
        for (l, a) in self.layers[1..].iter().zip(&self.acts) {
            h = l.infer(&a.infer(&h)?)?;
        }
        Ok(h)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.layers[0].forward(x)?;
        for (l, a) in self.layers[1..].iter_mut().zip(&mut self.acts) {
            h = l.forward(&a.forward(&h)?)?;
        }
        Ok(h)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = g.clone();
        for i in (1..self.layers.len()).rev() {
            g = self.layers[i].backward(&g)?;
            g = self.acts[i - 1].backward(&g)?;
        }
        self.layers[0].backward(&g)
    }
}
