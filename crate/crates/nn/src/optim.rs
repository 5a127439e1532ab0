use std::f64::consts::PI;

use crate::{Error, Module, Real, Result};

/// Adam with decoupled weight decay on parameters flagged `decay`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Adam<T> {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; callers zero them before the next accumulation.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<()> {
        let mut bad = None;
        module.visit_params("", &mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let decay = T::of(self.lr * self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params("", &mut |_, p| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.value.len()]);
                vs.push(vec![T::zero(); p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.value.len(), "optimizer state does not match parameters");
            let apply_decay = p.decay && decay > T::zero();
            for (((w, g), mi), vi) in p.value.data.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * *g;
                *vi = b2 * *vi + ob2 * *g * *g;
                let update = step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
                if apply_decay {
                    *w -= decay * *w;
                }
                *w -= update;
            }
            idx += 1;
        });
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    let s = step.min(total) as f64 / total.max(1) as f64;
    lr0 * 0.5 * (1.0 + (PI * s).cos())
}

/// Exponential decay from `lr0` to `final_ratio · lr0` at `total`.
pub fn exp_decay_lr(step: u64, total: u64, lr0: f64, final_ratio: f64) -> f64 {
    let s = step.min(total) as f64 / total.max(1) as f64;
    lr0 * final_ratio.powf(s)
}
