//! Acceptance suite: one line per criterion, then a single verdict.
//!
//! Run with `cargo test -p relight-cli --release --test acceptance -- --nocapture`
//! to see the report. The training criteria take several minutes each.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use glam::DVec3;
use rand::Rng;
use relight_bake::cnn::{build_raymap, gbuffer_errors, nyquist_spike, CnnConfig, DirectRenderer, HEAD_CHANNELS};
use relight_bake::distill::{
    build_pseudo_dataset, hash_optimizer, moving_average, train_cnn, train_hash, CnnTrainConfig, HashTrainConfig, LossRow,
    PseudoConfig, SurfacePool,
};
use relight_bake::hash::{HashConfig, HashGrid, HashRenderer};
use relight_cli::commands::{held_out_eval, sky_for_seed, test_cameras, train_cameras};
use relight_cli::render::{load_env, render_view, Baked};
use relight_cli::Settings;
use relight_core::brdf::{eval_brdf, fresnel_schlick, ggx_ndf, pdf_ggx_vndf, sample_ggx_vndf, BrdfParams, Lobes};
use relight_core::envlight::{EnvLight, EnvironmentMap};
use relight_core::geom::{stratified_hemisphere_dirs, RngStream};
use relight_core::integrator::{
    direct_radiance, shade_gbuffer, ConstantVisibility, ShadeConfig, ShadingPoint, Strategy, Teacher, VisQuery,
    VisibilityProvider,
};
use relight_core::luminance;
use relight_core::metrics::{bench_render, linear_fit, psnr, FrameTiming};
use relight_core::scene::{Aabb, Camera, GBuffer, GPixel, Material, PoseSampler, Primitive, SdfScene, Shape};
use relight_core::svgf::{atrous_filter, denoise, depth_gradient, AuxBuffers, SvgfConfig};
use relight_nn::gradcheck::GradCheck;
use relight_nn::optim::Adam;
use relight_nn::{init_rng, Conv2d, ConvTranspose2d, Gelu, InstanceNorm, Layer, Linear, Mlp, Sigmoid, Tensor, Upsample2x};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

fn scene(name: &str) -> SdfScene {
    SdfScene::load(asset(&format!("scenes/{name}.scene"))).expect("bundled scene")
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Models trained by one criterion and reused by later ones.
#[derive(Default)]
struct Shared {
    occluder_hash: Option<HashRenderer<f32>>,
    spheres_cnn: Option<DirectRenderer<f32>>,
}

// 1 ------------------------------------------------------------------------

fn furnace() -> Outcome {
    let t = Instant::now();
    let (w, h) = (32, 32);
    let cam = Camera::new(DVec3::new(0.0, 0.0, 2.0), DVec3::ZERO, DVec3::Y, 40.0, w, h).unwrap();
    let gb = GBuffer::from_pixels(
        w,
        h,
        (0..w * h).map(|i| {
            let ray = cam.pixel_ray(i % w, i / w);
            let t = -ray.origin.z / ray.direction.z;
            GPixel {
                albedo: DVec3::ONE,
                roughness: 0.5,
                normal: DVec3::Z,
                coord: ray.at(t),
                mask: 1.0,
                depth: t,
            }
        }),
    );
    let env = EnvLight::new(EnvironmentMap::constant(32, 16, DVec3::ONE).unwrap()).unwrap();
    let mut cfg = ShadeConfig::new(&env, 2048, 1, 1);
    cfg.lobes = Lobes::DiffuseOnly;
    let frame = shade_gbuffer(&gb, &ConstantVisibility::ALL_VISIBLE, &cfg, &cam);
    let err = frame.radiance.iter().map(|c| (*c - DVec3::ONE).abs().max_element()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        err <= 0.02 && secs < 30.0,
        format!("max |L-1| {err:.4} (<= 0.02) over 32x32 at spp 2048 in {secs:.1} s (< 30 s)"),
    )
}

// 2 ------------------------------------------------------------------------

/// Stratified quadrature of the reflected radiance over 256x256 sphere cells.
fn brute_force(p: &BrdfParams, wo: DVec3, env: &EnvLight) -> DVec3 {
    let n = 256;
    let mut acc = DVec3::ZERO;
    for i in 0..n {
        let z = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        for j in 0..n {
            let phi = 2.0 * PI * (j as f64 + 0.5) / n as f64;
            let d = DVec3::new(r * phi.cos(), r * phi.sin(), z);
            let c = d.dot(p.normal);
            if c > 0.0 {
                acc += eval_brdf(p, d, wo) * env.radiance(d) * c;
            }
        }
    }
    acc * (4.0 * PI / (n * n) as f64)
}

fn mis_correctness() -> Outcome {
    let sc = SdfScene::new(
        "glossy-sphere",
        vec![Primitive {
            shape: Shape::Sphere {
                center: DVec3::ZERO,
                radius: 0.2,
            },
            material: Material::Uniform {
                albedo: DVec3::new(0.7, 0.5, 0.3),
                roughness: 0.3,
            },
        }],
    );
    let env = EnvLight::new(sky_for_seed(16, 3).unwrap()).unwrap();
    assert_eq!((env.map.width(), env.map.height()), (16, 8));
    let cam = Camera::new(DVec3::new(0.3, 0.4, 1.1), DVec3::ZERO, DVec3::Y, 28.0, 20, 20).unwrap();
    let gb = sc.trace_gbuffer(&cam);
    let cfg = ShadeConfig::new(&env, 1024, 1, 5);
    let frame = shade_gbuffer(&gb, &ConstantVisibility::ALL_VISIBLE, &cfg, &cam);

    let mut points = Vec::new();
    for i in 0..gb.len() {
        let wo = -cam.pixel_ray(i % gb.width, i / gb.width).direction;
        if gb.covered(i) && gb.normal[i].dot(wo) > 0.0 {
            points.push((i, BrdfParams::new(gb.albedo[i], gb.roughness[i], gb.normal[i]), wo));
        }
    }
    let mut rel = Vec::new();
    for (i, p, wo) in &points {
        let oracle = luminance(brute_force(p, *wo, &env));
        rel.push((luminance(frame.radiance[*i]) - oracle).abs() / oracle);
    }
    let mean_rel = rel.iter().sum::<f64>() / rel.len() as f64;

    // Independent single-round estimates per strategy at a few pixels.
    let k = 4096;
    let mut worst_sigma = 0.0f64;
    for (_, p, wo) in points.iter().step_by(points.len() / 3).take(3) {
        let sp = ShadingPoint {
            x: DVec3::ZERO,
            brdf: *p,
        };
        let stats: Vec<(f64, f64)> = [Strategy::Mis, Strategy::LightOnly, Strategy::BrdfOnly]
            .iter()
            .map(|&s| {
                let mut c = ShadeConfig::new(&env, 1, 1, 9);
                c.strategy = s;
                let v: Vec<f64> = (0..k)
                    .map(|j| {
                        let mut rng = RngStream::new(9, j as u64 + 1000 * s as u64);
                        luminance(direct_radiance(&sp, *wo, &c, &ConstantVisibility::ALL_VISIBLE, &mut rng))
                    })
                    .collect();
                let m = v.iter().sum::<f64>() / k as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64;
                (m, (var / k as f64).sqrt())
            })
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let (ma, sa) = stats[a];
                let (mb, sb) = stats[b];
                worst_sigma = worst_sigma.max((ma - mb).abs() / (sa * sa + sb * sb).sqrt());
            }
        }
    }
    verdict(
        mean_rel <= 0.02 && worst_sigma <= 3.0,
        format!(
            "MIS vs 65536-direction quadrature: mean per-pixel relative error {:.4} (<= 0.02) over {} pixels; \
             strategies agree within {worst_sigma:.2} sigma (<= 3)",
            mean_rel,
            rel.len()
        ),
    )
}

// 3 ------------------------------------------------------------------------

/// ∫ D(h) (n·h) dω over a geometric grid in θ, dense near the peak.
fn ndf_integral(alpha: f64) -> f64 {
    let n = 200_000;
    let (t0, t1) = (1e-9f64, PI / 2.0);
    let ratio = (t1 / t0).ln();
    let f = |t: f64| ggx_ndf(t.cos(), alpha) * t.cos() * t.sin();
    let mut acc = 0.5 * 1e-9 * f(1e-9); // [0, t0]
    let mut prev = (t0, f(t0));
    for i in 1..=n {
        let t = t0 * (ratio * i as f64 / n as f64).exp();
        let v = f(t);
        acc += 0.5 * (v + prev.1) * (t - prev.0);
        prev = (t, v);
    }
    2.0 * PI * acc
}

/// Chi-square p-value of VNDF samples against the integrated analytic pdf.
fn vndf_chi2(theta_o: f64, roughness: f64, seed: u64) -> f64 {
    let p = BrdfParams::new(DVec3::ONE, roughness, DVec3::Z);
    let wo = DVec3::new(theta_o.sin(), 0.0, theta_o.cos());
    let (nt, np, sub) = (16usize, 32usize, 16usize);
    let n = 200_000usize;
    let mut observed = vec![0.0; nt * np + 1];
    let mut rng = RngStream::new(seed, 0);
    for _ in 0..n {
        match sample_ggx_vndf(wo, &p, rng.next_f64(), rng.next_f64()) {
            Some((wi, _)) => {
                let ti = ((wi.z * nt as f64) as usize).min(nt - 1);
                let phi = wi.y.atan2(wi.x).rem_euclid(2.0 * PI);
                let pi = ((phi / (2.0 * PI) * np as f64) as usize).min(np - 1);
                observed[ti * np + pi] += 1.0;
            }
            None => observed[nt * np] += 1.0,
        }
    }
    let dz = 1.0 / (nt * sub) as f64;
    let dphi = 2.0 * PI / (np * sub) as f64;
    let mut expected = vec![0.0; nt * np + 1];
    for ti in 0..nt {
        for pi in 0..np {
            let mut mass = 0.0;
            for a in 0..sub {
                let z = (ti * sub + a) as f64 * dz + 0.5 * dz;
                let r = (1.0 - z * z).max(0.0).sqrt();
                for b in 0..sub {
                    let phi = (pi * sub + b) as f64 * dphi + 0.5 * dphi;
                    mass += pdf_ggx_vndf(wo, DVec3::new(r * phi.cos(), r * phi.sin(), z), &p);
                }
            }
            expected[ti * np + pi] = n as f64 * mass * dz * dphi;
        }
    }
    let upper: f64 = expected.iter().sum();
    expected[nt * np] = (n as f64 - upper).max(0.0);
    // Pool sparse cells so every category expects at least 5.
    let (mut chi, mut cats, mut po, mut pe) = (0.0, 0usize, 0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        if *e >= 5.0 {
            chi += (o - e).powi(2) / e;
            cats += 1;
        } else {
            po += o;
            pe += e;
        }
    }
    if pe > 0.0 {
        chi += (po - pe).powi(2) / pe.max(1e-12);
        cats += 1;
    }
    1.0 - ChiSquared::new((cats - 1) as f64).unwrap().cdf(chi)
}

fn brdf_numerics() -> Outcome {
    let ndf: Vec<f64> = [0.0081, 0.09, 1.0].iter().map(|&a| ndf_integral(a)).collect();
    let ndf_ok = ndf.iter().all(|v| (v - 1.0).abs() <= 1e-3);
    let schlick_ok = fresnel_schlick(1.0, 0.04) == 0.04 && fresnel_schlick(0.0, 0.04) == 1.0;
    let pvals = [vndf_chi2(0.5, 0.5, 1), vndf_chi2(1.2, 0.3, 2), vndf_chi2(0.1, 0.8, 3)];
    let chi_ok = pvals.iter().all(|p| *p > 0.01);
    verdict(
        ndf_ok && schlick_ok && chi_ok,
        format!(
            "NDF integrals {:.6} / {:.6} / {:.6} (1 +- 1e-3); Schlick endpoints exact: {schlick_ok}; \
             VNDF chi-square p-values {:.3} / {:.3} / {:.3} (> 0.01)",
            ndf[0], ndf[1], ndf[2], pvals[0], pvals[1], pvals[2]
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = init_rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn unit_box() -> Aabb {
    Aabb {
        min: DVec3::ZERO,
        max: DVec3::ONE,
    }
}

/// Worst relative error over the sparse hash-table gradient.
fn hash_table_error() -> f64 {
    let cfg = HashConfig {
        levels: 4,
        table_log2: 8,
        n_max: 32.0,
        ..HashConfig::desk()
    };
    let mut g = HashGrid::<f64>::new(cfg, unit_box(), &mut init_rng(7));
    let x = random(&[5, 3], 8).map(|v| 0.5 + 0.5 * v);
    let y = g.forward(&x).unwrap();
    let r = random(&y.shape, 9);
    g.table.zero_grad();
    g.backward(&r).unwrap();
    let analytic = g.table.grad.clone();
    let loss = |g: &HashGrid<f64>| g.infer(&x).unwrap().data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in (0..analytic.len()).filter(|&i| analytic[i] != 0.0 || i % 97 == 0) {
        let v = g.table.value.data[i];
        g.table.value.data[i] = v + h;
        let lp = loss(&g);
        g.table.value.data[i] = v - h;
        let lm = loss(&g);
        g.table.value.data[i] = v;
        let num = (lp - lm) / (2.0 * h);
        worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-3));
    }
    worst
}

fn gradient_integrity() -> Outcome {
    let gc = GradCheck::default();
    let mut layers: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str, l: &mut dyn Layer<f64>, x: Tensor<f64>| {
        layers.push((name, gc.run(l, &x).unwrap().max()));
    };
    let mut lin = Linear::<f64>::new(4, 3, &mut init_rng(1));
    lin.bias.value.data = vec![0.1, -0.2, 0.3];
    run("linear", &mut lin, random(&[4, 4], 2));
    run("conv1x1", &mut Conv2d::<f64>::new(3, 2, 1, &mut init_rng(3)), random(&[2, 3, 4, 4], 4));
    run("conv3x3", &mut Conv2d::<f64>::new(2, 3, 3, &mut init_rng(5)), random(&[2, 2, 4, 4], 6));
    run("conv-transpose", &mut ConvTranspose2d::<f64>::new(2, 2, &mut init_rng(7)), random(&[1, 2, 4, 4], 8));
    let mut inorm = InstanceNorm::<f64>::new(3);
    inorm.gamma.value.data = vec![1.3, -0.7, 0.9];
    inorm.beta.value.data = vec![0.1, 0.0, -0.4];
    run("instance-norm", &mut inorm, random(&[2, 3, 4, 4], 9));
    run("gelu", &mut Gelu::<f64>::new(), random(&[1, 2, 4, 4], 10).map(|v| 3.0 * v));
    run("sigmoid", &mut Sigmoid::<f64>::new(), random(&[1, 2, 4, 4], 11).map(|v| 4.0 * v));
    run("upsample", &mut Upsample2x::new(), random(&[1, 2, 4, 4], 12));
    run("mlp", &mut Mlp::<f64>::new(&[5, 8, 8, 3], &mut init_rng(13)), random(&[4, 5], 14));
    let hcfg = HashConfig {
        levels: 3,
        table_log2: 6,
        n_max: 16.0,
        hidden: 8,
        ..HashConfig::desk()
    };
    let mut hr = HashRenderer::<f64>::new(hcfg, unit_box(), 9);
    let f = random(&[4, 6], 10).map(|v| 0.5 * v);
    run("hash-decoder", &mut hr.decoder, f.clone());
    let q = hr.tracer_input(&f, &[0, 1, 3], &[DVec3::X, DVec3::Y, DVec3::new(0.0, 0.6, 0.8)]);
    run("hash-tracer", &mut hr.tracer, q);
    layers.push(("hash-table", hash_table_error()));

    let cfg = CnnConfig {
        stem_channels: 4,
        trunk_depth: 2,
        sr_channels: vec![4, 3, 3],
        transposed_upsampler: false,
    };
    let mut m = DirectRenderer::<f64>::new(cfg, unit_box(), 1);
    m.randomize(2);
    let e2e = GradCheck {
        max_probes: 64,
        ..GradCheck::default()
    }
    .run(&mut m, &random(&[1, 6, 2, 2], 3))
    .unwrap()
    .max();

    let worst = layers.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        worst.1 < 1e-4 && e2e < 1e-3,
        format!(
            "{} layer checks, worst {} {:.2e} (< 1e-4); end-to-end CNN {:.2e} (< 1e-3)",
            layers.len(),
            worst.0,
            worst.1,
            e2e
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn non_divergent(rows: &[LossRow]) -> (bool, f64, f64) {
    let ma = moving_average(&rows.iter().map(|r| r.total).collect::<Vec<_>>(), 100);
    let (first, last) = (ma[0], *ma.last().unwrap());
    (last <= first, first, last)
}

fn hash_distillation(shared: &mut Shared) -> Outcome {
    let sc = scene("occluder-pair");
    let t = Instant::now();
    let s = Settings {
        width: 64,
        height: 64,
        ..Settings::default()
    };
    let test = test_cameras(&sc, &s, &[]).unwrap();
    let pcfg = PseudoConfig {
        n_random: 64,
        width: 64,
        height: 64,
        ..PseudoConfig::default()
    };
    let data = build_pseudo_dataset(&sc, &pcfg, &[], &test).unwrap();
    let pool = SurfacePool::from_dataset(&sc, &data);
    let mut r = HashRenderer::<f32>::new(HashConfig::desk(), HashRenderer::<f32>::bounds_for(&sc.aabb), 0);
    let tc = HashTrainConfig::desk();
    let mut adam = hash_optimizer(&tc, &mut r);
    let rows = train_hash(&mut r, &mut adam, &sc, &pool, &tc).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let e = held_out_eval(&sc, &r, &test, 0).unwrap();
    let (nd, first, last) = non_divergent(&rows);
    shared.occluder_hash = Some(r);
    verdict(
        e.visibility_accuracy >= 0.95 && e.occluded_depth_mae <= 0.03 && secs <= 600.0 && nd,
        format!(
            "held-out visibility accuracy {:.4} (>= 0.95) over {} pairs, occluded depth MAE {:.4} (<= 0.03) over {}; \
             {} steps in {secs:.0} s (<= 600); loss MA100 {first:.3} -> {last:.3}",
            e.visibility_accuracy, e.pairs, e.occluded_depth_mae, e.occluded_pairs, tc.steps
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn worst_spike_fixture(transposed: bool, seed: u64) -> f64 {
    let cfg = CnnConfig {
        stem_channels: 16,
        trunk_depth: 2,
        sr_channels: vec![8, 8, 8],
        transposed_upsampler: transposed,
    };
    let bx = Aabb {
        min: DVec3::splat(-1.0),
        max: DVec3::splat(1.0),
    };
    let mut m = DirectRenderer::<f32>::new(cfg, bx, seed);
    m.randomize(seed + 100);
    let d = DVec3::new(0.2, -0.3, -1.0).normalize();
    let mut data = Vec::new();
    for c in [0.1, 0.4, 2.0, d.x, d.y, d.z] {
        data.extend(std::iter::repeat_n(c as f32, 64));
    }
    let y = m.infer(&Tensor::from_vec(&[1, 6, 8, 8], data).unwrap()).unwrap();
    worst_spike(&y, 0)
}

fn worst_spike(y: &Tensor<f32>, n: usize) -> f64 {
    let (h, w) = (y.shape[2], y.shape[3]);
    (0..HEAD_CHANNELS)
        .map(|c| nyquist_spike(&y.plane(n, c).iter().map(|v| *v as f64).collect::<Vec<_>>(), w, h))
        .fold(0.0, f64::max)
}

fn cnn_distillation(shared: &mut Shared) -> Outcome {
    let sc = scene("spheres");
    let t = Instant::now();
    let s = Settings {
        width: 128,
        height: 128,
        train_poses: 8,
        ..Settings::default()
    };
    let train = train_cameras(&sc, &s).unwrap();
    let pcfg = PseudoConfig {
        n_random: 0,
        width: 128,
        height: 128,
        ..PseudoConfig::default()
    };
    let data = build_pseudo_dataset(&sc, &pcfg, &train, &[]).unwrap();
    let mut m = DirectRenderer::<f32>::new(CnnConfig::desk(), DirectRenderer::<f32>::coord_box_for(&sc.aabb), 0);
    let tc = CnnTrainConfig {
        steps: 400,
        poses_per_batch: 8,
        lr0: 2e-3,
        seed: 0,
    };
    let mut adam = Adam::new(tc.lr0, 0.0);
    let rows = train_cnn(&mut m, &mut adam, &data, &tc).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let preds = m.forward_gbuffer(&data.cameras).unwrap();
    let (mut al, mut nd) = (0.0, 0.0);
    for (p, r) in preds.iter().zip(&data.gbuffers) {
        let (a, n) = gbuffer_errors(p, r);
        al += a / preds.len() as f64;
        nd += n / preds.len() as f64;
    }
    let mut trained_spike = 0.0f64;
    for cam in &data.cameras {
        let y = m.infer(&build_raymap::<f32>(cam, 8).unwrap()).unwrap();
        trained_spike = trained_spike.max(worst_spike(&y, 0));
    }
    let bilinear = (0..3).map(|s| worst_spike_fixture(false, s)).fold(0.0, f64::max);
    let transposed = (0..3).map(|s| worst_spike_fixture(true, s)).fold(f64::INFINITY, f64::min);
    let (ndiv, first, last) = non_divergent(&rows);
    shared.spheres_cnn = Some(m);
    verdict(
        al <= 0.02 && nd <= 5.0 && trained_spike <= 2.0 && bilinear <= 2.0 && transposed > 2.0 && ndiv,
        format!(
            "8 poses, {} steps in {secs:.0} s: masked albedo L1 {al:.4} (<= 0.02), normal error {nd:.2} deg (<= 5); \
             Nyquist spike trained {trained_spike:.2}, bilinear fixture {bilinear:.2} (<= 2), \
             transposed fixture {transposed:.2} (> 2, must fail); loss MA100 {first:.3} -> {last:.3}",
            tc.steps
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn two_bounce_consistency(shared: &Shared) -> Outcome {
    let sc = scene("occluder-pair");
    let env = load_env(&asset("env/sky-train.pfm")).unwrap();
    let cam = PoseSampler::for_scene(&sc, 48, 48).camera_at(0.6, 0.7).unwrap();
    let gb = sc.trace_gbuffer(&cam);
    let cfg1 = ShadeConfig::new(&env, 16, 1, 3);
    let cfg2 = ShadeConfig::new(&env, 16, 2, 3);

    let v1 = shade_gbuffer(&gb, &ConstantVisibility::ALL_VISIBLE, &cfg1, &cam);
    let v2 = shade_gbuffer(&gb, &ConstantVisibility::ALL_VISIBLE, &cfg2, &cam);
    let bitwise = v1.radiance == v2.radiance;

    let teacher = Teacher::new(&sc);
    let t1 = shade_gbuffer(&gb, &teacher, &cfg1, &cam);
    let t2 = shade_gbuffer(&gb, &teacher, &cfg2, &cam);
    let decreases = t1
        .radiance
        .iter()
        .zip(&t2.radiance)
        .filter(|(a, b)| b.cmplt(**a).any())
        .count();

    let Some(hash) = shared.occluder_hash.as_ref() else {
        return Err("needs the criterion 5 hash renderer".into());
    };
    let b1 = shade_gbuffer(&gb, hash, &cfg1, &cam);
    let b2 = shade_gbuffer(&gb, hash, &cfg2, &cam);
    let (mut mae, mut n, mut mean_ind) = (0.0, 0, 0.0);
    for i in 0..gb.len() {
        if gb.covered(i) {
            let ti = t2.radiance[i] - t1.radiance[i];
            let bi = b2.radiance[i] - b1.radiance[i];
            mae += (ti - bi).abs().element_sum() / 3.0;
            mean_ind += ti.element_sum() / 3.0;
            n += 1;
        }
    }
    mae /= n as f64;
    mean_ind /= n as f64;
    verdict(
        bitwise && decreases == 0 && mae <= 0.05,
        format!(
            "V=1 two-bounce equals direct bitwise: {bitwise}; pixels where indirect lowers radiance: {decreases}; \
             baked vs teacher indirect MAE {mae:.4} (<= 0.05, mean teacher indirect {mean_ind:.4})"
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn end_to_end_parity(shared: &mut Shared) -> Outcome {
    let Some(cnn) = shared.spheres_cnn.take() else {
        return Err("needs the criterion 6 CNN renderer".into());
    };
    let sc = scene("spheres");
    let t = Instant::now();
    let s = Settings {
        width: 64,
        height: 64,
        ..Settings::default()
    };
    let train = train_cameras(&sc, &s).unwrap();
    let pcfg = PseudoConfig {
        n_random: 64,
        width: 64,
        height: 64,
        ..PseudoConfig::default()
    };
    let data = build_pseudo_dataset(&sc, &pcfg, &train, &[]).unwrap();
    let pool = SurfacePool::from_dataset(&sc, &data);
    let mut hash = HashRenderer::<f32>::new(HashConfig::desk(), HashRenderer::<f32>::bounds_for(&sc.aabb), 0);
    let tc = HashTrainConfig::desk();
    let mut adam = hash_optimizer(&tc, &mut hash);
    train_hash(&mut hash, &mut adam, &sc, &pool, &tc).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    let baked = Baked { cnn, hash };
    let env = load_env(&asset("env/sky-heldout.pfm")).unwrap();
    let rs = Settings {
        spp: 32,
        bounces: 2,
        ..Settings::default()
    };
    let cam = train_cameras(&sc, &Settings { width: 128, height: 128, ..Settings::default() }).unwrap()[0];
    let teacher = render_view(&sc, &env, None, &cam, &rs).unwrap();
    let student = render_view(&sc, &env, Some(&baked), &cam, &rs).unwrap();
    let clip = |v: &[DVec3]| v.iter().map(|c| c.clamp(DVec3::ZERO, DVec3::ONE)).collect::<Vec<_>>();
    let db = psnr(&clip(&student.image), &clip(&teacher.image), 1.0).unwrap();
    verdict(
        db >= 30.0,
        format!("baked vs teacher on spheres, held-out sky, 128x128, spp 32, 2 bounces: PSNR {db:.2} dB (>= 30); hash trained in {train_secs:.0} s"),
    )
}

// 9 ------------------------------------------------------------------------

fn relative_speed() -> Outcome {
    let sc = scene("cornell-sdf");
    let teacher = Teacher {
        max_steps: 128,
        ..Teacher::new(&sc)
    };
    let hash = HashRenderer::<f32>::new(HashConfig::desk(), HashRenderer::<f32>::bounds_for(&sc.aabb), 0);
    let cam = PoseSampler::for_scene(&sc, 64, 64).camera_at(0.0, 0.3).unwrap();
    let gb = sc.trace_gbuffer(&cam);
    let covered: Vec<usize> = (0..gb.len()).filter(|&i| gb.covered(i)).collect();
    // Integrator-shaped batches: 256 points with their shadow rays.
    let mut batches = Vec::new();
    let mut rng = RngStream::new(4, 0);
    for chunk in covered.chunks(256) {
        let points: Vec<DVec3> = chunk.iter().map(|&i| gb.coord[i]).collect();
        let mut queries = Vec::new();
        for (k, &i) in chunk.iter().enumerate() {
            for d in stratified_hemisphere_dirs(16, gb.normal[i], &mut rng).unwrap() {
                queries.push(VisQuery { point: k as u32, dir: d });
            }
        }
        batches.push((points, queries));
    }
    let total: usize = batches.iter().map(|b| b.1.len()).sum();
    let time = |p: &dyn VisibilityProvider| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                for (pts, qs) in &batches {
                    std::hint::black_box(p.vis_depth(pts, qs));
                }
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (tt, tb) = (time(&teacher), time(&hash));
    let ratio = tt / tb;

    let env = load_env(&asset("env/sky-train.pfm")).unwrap();
    let spps = [4usize, 8, 16, 32];
    let mut vis_ms = Vec::new();
    for &spp in &spps {
        let cfg = ShadeConfig::new(&env, spp, 1, 0);
        let b = bench_render(
            || {
                Ok(FrameTiming {
                    stages: shade_gbuffer(&gb, &hash, &cfg, &cam).times,
                    dnsr: Default::default(),
                })
            },
            2,
            5,
        )
        .unwrap();
        vis_ms.push(b.vis_ms);
    }
    let (slope, _, r2) = linear_fit(&spps.map(|v| v as f64), &vis_ms);
    verdict(
        ratio >= 3.0 && r2 >= 0.98,
        format!(
            "cornell-sdf, {total} queries: baked {:.2} Mq/s vs sphere trace (128 steps) {:.2} Mq/s, ratio {ratio:.2} (>= 3); \
             baked vis stage {:?} ms at spp {:?}, slope {slope:.2} ms/spp, r2 {r2:.4} (>= 0.98)",
            total as f64 / tb / 1e6,
            total as f64 / tt / 1e6,
            vis_ms.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
            spps
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn svgf() -> Outcome {
    let (w, h) = (64, 64);
    let depth = vec![2.0; w * h];
    let grad = depth_gradient(&depth, w, h);
    let mut normal = vec![DVec3::Z; w * h];
    let mask = vec![1.0; w * h];
    let albedo = vec![DVec3::ONE; w * h];
    let cfg = SvgfConfig::default();
    let flat = vec![DVec3::Z; w * h];
    let base = AuxBuffers {
        width: w,
        height: h,
        depth: &depth,
        normal: &flat,
        depth_gradient: &grad,
        mask: &mask,
        albedo: &albedo,
    };
    let constant = vec![DVec3::new(0.3, 0.6, 0.9); w * h];
    let idempotent = denoise(&constant, &AuxBuffers { normal: &normal, ..base }, &cfg).unwrap() == constant;

    let mut rng = RngStream::new(11, 0);
    let noisy: Vec<DVec3> = (0..w * h).map(|_| DVec3::splat(0.5 + 0.4 * (rng.next_f64() - 0.5))).collect();
    let var = |v: &[DVec3]| {
        let m = v.iter().map(|c| c.x).sum::<f64>() / v.len() as f64;
        v.iter().map(|c| (c.x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let out = denoise(&noisy, &AuxBuffers { normal: &normal, ..base }, &cfg).unwrap();
    let reduction = var(&noisy) / var(&out);

    let mut step = vec![DVec3::ZERO; w * h];
    for i in 0..w * h {
        if i % w >= w / 2 {
            normal[i] = DVec3::X;
            step[i] = DVec3::ONE;
        }
    }
    let (filtered, _) = atrous_filter(&step, &vec![0.05; w * h], &AuxBuffers { normal: &normal, ..base }, &cfg).unwrap();
    let mut change = 0.0;
    for y in 0..h {
        for x in [w / 2 - 1, w / 2] {
            change += (filtered[y * w + x].x - step[y * w + x].x).abs();
        }
    }
    change /= (2 * h) as f64;
    verdict(
        idempotent && reduction >= 4.0 && change <= 0.1,
        format!(
            "constant image unchanged: {idempotent}; noise variance reduced {reduction:.1}x (>= 4); \
             edge change {change:.4} of the step (<= 0.1)"
        ),
    )
}

// 11 -----------------------------------------------------------------------

fn relight(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relight"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("relight {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = asset("scenes/spheres.scene");
    let e = asset("env/sky-train.pfm");
    let (s, e) = (s.to_str().unwrap(), e.to_str().unwrap());
    let mut compared = Vec::new();
    for run in ["a", "b"] {
        let d = |name: &str| root.join(run).join(name).to_str().unwrap().to_string();
        let data = d("data");
        relight(&["pseudo", "--scene", s, "--n-random", "4", "--width", "32", "--height", "32", "--seed", "3", "--out", &data])?;
        relight(&[
            "train-cnn", "--scene", s, "--data", &data, "--steps", "3", "--poses-per-batch", "4", "--seed", "3", "--out", &d("cnn"),
        ])?;
        relight(&["train-hash", "--scene", s, "--data", &data, "--steps", "5", "--seed", "3", "--out", &d("hash")])?;
        let common = ["--scene", s, "--env", e, "--width", "32", "--height", "32", "--spp", "4", "--bounces", "2", "--seed", "3"];
        relight(&[&["render"][..], &common, &["--out", &d("teacher")]].concat())?;
        let cnn = d("cnn/cnn.ckpt");
        let hash = d("hash/hash.ckpt");
        relight(&[&["render"][..], &common, &["--provider", "baked", "--cnn", &cnn, "--hash", &hash, "--out", &d("baked")]].concat())?;
    }
    for f in [
        "data/manifest.json",
        "cnn/cnn_loss.csv",
        "cnn/cnn.ckpt",
        "hash/hash_loss.csv",
        "hash/hash.ckpt",
        "teacher/render.pfm",
        "teacher/raw.pfm",
        "baked/render.pfm",
        "baked/raw.pfm",
    ] {
        let a = std::fs::read(root.join("a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(root.join("b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        compared.push((f, a == b));
    }
    let differing: Vec<&str> = compared.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        differing.is_empty(),
        format!("{} artifacts compared across two seeded runs, differing: {differing:?}", compared.len()),
    )
}

#[test]
fn acceptance() {
    let mut shared = Shared::default();
    let mut failures = Vec::new();
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut(&mut Shared) -> Outcome, shared: &mut Shared| {
        let t = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(shared)))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                println!("criterion {n:>2} FAIL {name}: {d} [{secs:.1} s]");
                failures.push(n);
            }
        }
    };
    report(1, "furnace", &mut |_| furnace(), &mut shared);
    report(2, "MIS correctness", &mut |_| mis_correctness(), &mut shared);
    report(3, "BRDF numerics", &mut |_| brdf_numerics(), &mut shared);
    report(4, "gradient integrity", &mut |_| gradient_integrity(), &mut shared);
    report(5, "hash-renderer distillation", &mut hash_distillation, &mut shared);
    report(6, "CNN-renderer distillation", &mut cnn_distillation, &mut shared);
    report(7, "two-bounce consistency", &mut |s| two_bounce_consistency(s), &mut shared);
    report(8, "end-to-end parity", &mut end_to_end_parity, &mut shared);
    report(9, "relative speed", &mut |_| relative_speed(), &mut shared);
    report(10, "SVGF", &mut |_| svgf(), &mut shared);
    report(11, "determinism", &mut |_| determinism(), &mut shared);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
