use std::f64::consts::PI;

use glam::DVec3;
use proptest::prelude::*;
use relight_core::brdf::{eval_brdf, fresnel_schlick, ggx_ndf, pdf_ggx_vndf, sample_ggx_vndf, smith_g1, BrdfParams};
use relight_core::envlight::{dir_to_uv, uv_to_dir, EnvLight, EnvironmentMap};
use relight_core::geom::{build_onb, uniform_sphere, RngStream};
use relight_core::metrics::{psnr, ssim};

fn unit(theta: f64, phi: f64) -> DVec3 {
    DVec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

fn noisy_env(seed: u64) -> EnvironmentMap {
    let mut rng = RngStream::new(seed, 0);
    let px = (0..32 * 16).map(|_| DVec3::new(rng.next_f64(), rng.next_f64(), rng.next_f64()) * 3.0).collect();
    EnvironmentMap::new(32, 16, px).unwrap()
}

proptest! {
    #[test]
    fn onb_is_orthonormal(theta in 0.0..PI, phi in 0.0..2.0 * PI) {
        let n = unit(theta, phi);
        let b = build_onb(n).unwrap();
        let v = DVec3::new(0.3, -0.5, 0.8);
        prop_assert!((b.to_world(b.to_local(v)) - v).length() < 1e-12);
        prop_assert!((b.to_world(DVec3::Z) - n).length() < 1e-12);
    }

    #[test]
    fn brdf_is_reciprocal_and_nonnegative(
        ti in 0.0..1.5f64, pi in 0.0..6.28f64, to in 0.0..1.5f64, po in 0.0..6.28f64, r in 0.0..1.0f64,
    ) {
        let p = BrdfParams::new(DVec3::new(0.8, 0.4, 0.1), r, DVec3::Z);
        let (wi, wo) = (unit(ti, pi), unit(to, po));
        let a = eval_brdf(&p, wi, wo);
        let b = eval_brdf(&p, wo, wi);
        prop_assert!(a.min_element() >= 0.0);
        prop_assert!((a - b).abs().max_element() <= 1e-9 * a.max_element().max(1.0));
    }

    #[test]
    fn below_horizon_is_black(ti in 1.6..3.1f64, to in 0.0..1.5f64, r in 0.0..1.0f64) {
        let p = BrdfParams::new(DVec3::ONE, r, DVec3::Z);
        prop_assert_eq!(eval_brdf(&p, unit(ti, 0.3), unit(to, 1.0)), DVec3::ZERO);
    }

    #[test]
    fn fresnel_is_monotone(c1 in 0.0..1.0f64, c2 in 0.0..1.0f64) {
        let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(fresnel_schlick(lo, 0.04) >= fresnel_schlick(hi, 0.04));
    }

    #[test]
    fn g1_is_a_fraction(c in 0.001..1.0f64, a in 0.0081..1.0f64) {
        let g = smith_g1(c, a);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn vndf_samples_carry_their_pdf(to in 0.0..1.5f64, r in 0.1..1.0f64, u1 in 0.0..1.0f64, u2 in 0.0..1.0f64) {
        let p = BrdfParams::new(DVec3::ONE, r, DVec3::Z);
        let wo = unit(to, 0.7);
        if let Some((wi, pdf)) = sample_ggx_vndf(wo, &p, u1, u2) {
            prop_assert!(wi.z > 0.0);
            prop_assert!((wi.length() - 1.0).abs() < 1e-9);
            let q = pdf_ggx_vndf(wo, wi, &p);
            prop_assert!((pdf - q).abs() <= 1e-9 * q.max(1.0));
        }
    }

    #[test]
    fn uv_roundtrip(u in 0.001..0.999f64, v in 0.001..0.999f64) {
        let (u2, v2) = dir_to_uv(uv_to_dir(u, v));
        prop_assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9);
    }

    #[test]
    fn light_pdf_matches_sample(seed in 0u64..1000, u1 in 0.0..1.0f64, u2 in 0.0..1.0f64) {
        let env = EnvLight::new(noisy_env(seed % 7)).unwrap();
        let s = env.sample(u1, u2);
        let p = env.pdf(s.direction);
        prop_assert!((s.pdf - p).abs() <= 1e-6 * p.max(1.0));
    }

    #[test]
    fn psnr_is_symmetric(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 1);
        let a: Vec<DVec3> = (0..256).map(|_| DVec3::splat(rng.next_f64())).collect();
        let b: Vec<DVec3> = (0..256).map(|_| DVec3::splat(rng.next_f64())).collect();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
    }
}

/// Monte Carlo with uniform sphere sampling, independent of the light CDF.
#[test]
fn light_pdf_integrates_to_one() {
    let env = EnvLight::new(noisy_env(3)).unwrap();
    let mut rng = RngStream::new(5, 0);
    let n = 400_000;
    let sum: f64 = (0..n).map(|_| env.pdf(uniform_sphere(rng.next_f64(), rng.next_f64()))).sum();
    let integral = sum / n as f64 * 4.0 * PI;
    assert!((integral - 1.0).abs() < 0.01, "{integral}");
}

#[test]
fn light_samples_follow_radiance() {
    // Fraction of samples in the upper hemisphere vs. the luminance-weighted
    // solid-angle share, computed directly from the map.
    let env = EnvLight::new(noisy_env(9)).unwrap();
    let mut rng = RngStream::new(1, 0);
    let n = 200_000;
    let upper = (0..n).filter(|_| env.sample(rng.next_f64(), rng.next_f64()).direction.y > 0.0).count() as f64 / n as f64;
    let (w, h) = (env.map.width(), env.map.height());
    let (mut up, mut all) = (0.0, 0.0);
    for y in 0..h {
        let t0 = PI * y as f64 / h as f64;
        let t1 = PI * (y + 1) as f64 / h as f64;
        for x in 0..w {
            let c = env.map.pixel(x, y);
            let m = (c.x + c.y + c.z) * (t0.cos() - t1.cos());
            all += m;
            if uv_to_dir((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64).y > 0.0 {
                up += m;
            }
        }
    }
    assert!((upper - up / all).abs() < 0.02, "{upper} vs {}", up / all);
}

#[test]
fn ndf_projected_area_is_one() {
    for alpha in [0.05, 0.3, 1.0] {
        let n = 100_000;
        let mut acc = 0.0;
        for i in 0..n {
            let c = (i as f64 + 0.5) / n as f64;
            acc += ggx_ndf(c, alpha) * c;
        }
        let v = 2.0 * PI * acc / n as f64;
        assert!((v - 1.0).abs() < 2e-3, "alpha {alpha}: {v}");
    }
}
