//! Central finite-difference oracle for backward passes.
//!
//! The scalar probed is `L = Σ rᵢ·yᵢ` with fixed random weights `r`, so the
//! upstream gradient handed to `backward` is `r` itself.

use rand::Rng;

use crate::{init_rng, Layer, Real, Result, Tensor};

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// Largest relative error over probed input elements.
    pub input: f64,
    /// Largest relative error over probed parameter elements.
    pub params: f64,
    /// Name and flat index of the worst parameter element.
    pub worst: String,
    pub probes: usize,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.input.max(self.params)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

/// Indices to probe: all of them, or an evenly spread subset.
fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

pub struct GradCheck {
    pub h: f64,
    pub max_probes: usize,
    pub check_input: bool,
    pub seed: u64,
    /// Elements whose gradients are smaller than this fraction of the largest
    /// numeric gradient are compared against that fraction instead.
    pub floor_ratio: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-3,
            max_probes: 256,
            check_input: true,
            seed: 7,
            floor_ratio: 1e-2,
        }
    }
}

impl GradCheck {
    pub fn run<L: Layer<f64> + ?Sized>(&self, layer: &mut L, x: &Tensor<f64>) -> Result<GradReport> {
        let y = layer.forward(x)?;
        let mut rng = init_rng(self.seed);
        let r = Tensor::from_vec(&y.shape, (0..y.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())?;
        let loss = |y: &Tensor<f64>| y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        // Differences below the rounding noise of a central difference agree;
        // this matters for parameters whose true gradient is exactly zero,
        // such as a bias followed by instance norm.
        let noise = 64.0 * f64::EPSILON * y.data.iter().zip(&r.data).map(|(a, b)| (a * b).abs()).sum::<f64>() / self.h;
        let err = |a: f64, n: f64, floor: f64| if (a - n).abs() <= noise { 0.0 } else { relative_error(a, n, floor) };

        layer.zero_grad();
        let dx = layer.backward(&r)?;
        let mut analytic_params = Vec::new();
        layer.visit_params("", &mut |name, p| analytic_params.push((name.to_string(), p.grad.clone())));

        let mut report = GradReport::default();
        if self.check_input {
            let idx = probe_indices(x.len(), self.max_probes);
            let mut xp = x.clone();
            let mut numeric = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = xp.data[i];
                xp.data[i] = orig + self.h;
                let lp = loss(&layer.infer(&xp)?);
                xp.data[i] = orig - self.h;
                let lm = loss(&layer.infer(&xp)?);
                xp.data[i] = orig;
                numeric.push((lp - lm) / (2.0 * self.h));
            }
            let floor = self.floor_ratio * numeric.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (&i, n) in idx.iter().zip(&numeric) {
                report.input = report.input.max(err(dx.data[i], *n, floor));
            }
            report.probes += idx.len();
        }

        for (pi, (name, analytic)) in analytic_params.iter().enumerate() {
            let idx = probe_indices(analytic.len(), self.max_probes);
            let mut numeric = Vec::with_capacity(idx.len());
            for &i in &idx {
                let mut val = [0.0; 2];
                for (s, sign) in [1.0, -1.0].iter().enumerate() {
                    nudge(layer, pi, i, sign * self.h);
                    val[s] = loss(&layer.infer(x)?);
                    nudge(layer, pi, i, -sign * self.h);
                }
                numeric.push((val[0] - val[1]) / (2.0 * self.h));
            }
            let floor = self.floor_ratio * numeric.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (&i, n) in idx.iter().zip(&numeric) {
                let e = err(analytic[i], *n, floor);
                if e > report.params {
                    report.params = e;
                    report.worst = format!("{name}[{i}]");
                }
            }
            report.probes += idx.len();
        }
        Ok(report)
    }
}

fn nudge<L: Layer<f64> + ?Sized>(layer: &mut L, param: usize, i: usize, delta: f64) {
    let mut k = 0;
    layer.visit_params("", &mut |_, p| {
        if k == param {
            p.value.data[i] += delta;
        }
        k += 1;
    });
}

/// Casts every parameter of `src` into the matching parameter of `dst`.
pub fn copy_params<A: Real, B: Real>(src: &mut dyn crate::Module<A>, dst: &mut dyn crate::Module<B>) {
    let mut values = Vec::new();
    src.visit_params("", &mut |_, p| values.push(p.value.cast::<B>()));
    let mut it = values.into_iter();
    dst.visit_params("", &mut |name, p| {
        let v = it.next().unwrap_or_else(|| panic!("missing source tensor for {name}"));
        assert_eq!(v.shape, p.value.shape, "{name}");
        p.value = v;
    });
}
