//! Mean-reduced losses returning the value (accumulated in f64) and the
//! gradient with respect to the prediction.

use crate::layers::sigmoid;
use crate::{shape_err, Error, Real, Result};

fn same<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(&[a.len()], &[b.len()]));
    }
    Ok(())
}

fn sign<T: Real>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn l1_loss<T: Real>(pred: &[T], target: &[T]) -> Result<(f64, Vec<T>)> {
    same(pred, target)?;
    let n = pred.len().max(1) as f64;
    let inv = T::of(1.0 / n);
    let loss = pred.iter().zip(target).map(|(p, t)| (*p - *t).abs().f64()).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| sign(*p - *t) * inv).collect();
    Ok((loss, grad))
}

/// L1 averaged over elements with positive weight, each scaled by its weight.
/// The normaliser is the weight sum, so an all-zero mask gives zero loss.
pub fn weighted_l1<T: Real>(pred: &[T], target: &[T], weight: &[T]) -> Result<(f64, Vec<T>)> {
    same(pred, target)?;
    same(pred, weight)?;
    let wsum: f64 = weight.iter().map(|w| w.f64()).sum();
    if wsum <= 0.0 {
        return Ok((0.0, vec![T::zero(); pred.len()]));
    }
    let inv = 1.0 / wsum;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(weight)
        .map(|((p, t), w)| {
            loss += w.f64() * (*p - *t).abs().f64();
            sign(*p - *t) * T::of(w.f64() * inv)
        })
        .collect();
    Ok((loss * inv, grad))
}

/// Binary cross-entropy on logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_logit_loss<T: Real>(logits: &[T], targets: &[T]) -> Result<(f64, Vec<T>)> {
    let ones = vec![T::one(); logits.len()];
    weighted_bce_logit(logits, targets, &ones)
}

pub fn weighted_bce_logit<T: Real>(logits: &[T], targets: &[T], weight: &[T]) -> Result<(f64, Vec<T>)> {
    same(logits, targets)?;
    same(logits, weight)?;
    if let Some(t) = targets.iter().find(|t| **t != T::zero() && **t != T::one()) {
        return Err(Error::BadTarget(t.f64()));
    }
    let wsum: f64 = weight.iter().map(|w| w.f64()).sum();
    if wsum <= 0.0 {
        return Ok((0.0, vec![T::zero(); logits.len()]));
    }
    let inv = 1.0 / wsum;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .zip(weight)
        .map(|((z, y), w)| {
            let (zf, yf) = (z.f64(), y.f64());
            loss += w.f64() * (zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p());
            (sigmoid(*z) - *y) * T::of(w.f64() * inv)
        })
        .collect();
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_basics() {
        let x = [0.3f64, -1.0, 2.0];
        assert_eq!(l1_loss(&x, &x).unwrap().0, 0.0);
        let (l, g) = l1_loss(&[1.0f64, 0.0], &[0.0, 2.0]).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
        assert!(l1_loss(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bce_basics() {
        let (l, g) = bce_logit_loss(&[0.0f64], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] + 0.5).abs() < 1e-15);
        let (l, _) = bce_logit_loss(&[800.0f64, -800.0], &[1.0, 0.0]).unwrap();
        assert!(l.is_finite() && l < 1e-300);
        let (l, _) = bce_logit_loss(&[-800.0f64], &[1.0]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        assert!(matches!(bce_logit_loss(&[0.0f64], &[0.5]), Err(Error::BadTarget(_))));
    }

    #[test]
    fn zero_weight_elements_do_not_matter() {
        let z = [0.3f64, -2.0, 1.0];
        let w = [1.0, 0.0, 1.0];
        let (a, _) = weighted_bce_logit(&z, &[1.0, 0.0, 0.0], &w).unwrap();
        let (b, _) = weighted_bce_logit(&z, &[1.0, 1.0, 0.0], &w).unwrap();
        assert_eq!(a, b);
        let (c, _) = weighted_l1(&z, &[0.0, 5.0, 0.0], &w).unwrap();
        let (d, _) = weighted_l1(&z, &[0.0, -5.0, 0.0], &w).unwrap();
        assert_eq!(c, d);
    }
}
