//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs sequentially in a single process so the wall-clock benchmark is not
//! disturbed by concurrent tests. Set `ENARF_ACCEPTANCE=1,3,8` to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use enarf::checkpoint::{Checkpoint, Dtype};
use enarf::decoder::{
    narf_baseline_feature, DecoderCache, DecoderRef, DecoderShape, LinearForm, MlpDecoder,
    NarfBaseline, PosEncConfig,
};
use enarf::diffengine::{
    adam_step, batch_gradient, finite_diff_check_at, random_coords, AdamState, RayTask,
    RenderSession,
};
use enarf::kinematics::{
    euler_xyz, rasterize_bones, Camera, PoseConfig, PosePart, RigidTransform, Vec3,
};
use enarf::model::{Model, ModelConfig, Variant};
use enarf::objectives::{
    adversarial_losses, bone_loss, bone_loss_grad, dso_loss, dso_loss_grad, dso_ray_grad,
    generator_loss_grad, l2_with_grad, psnr, r1_penalty, ssim, Discriminator, LinearDiscriminator,
    RayTarget,
};
use enarf::renderer::{
    composite, composite_background, composite_backward, generate_rays, render_image,
    render_pixels, render_pixels_fixed, Composite, Ray, RenderConfig, RenderOutput,
};
use enarf::train::{evaluate, Frame, TrainConfig, Trainer};
use enarf::triplane::{
    feature_at, feature_at_backward, FieldOptions, TriPlaneField, FEATURE_CHANNELS,
};
use enarf::Image;
use enarf_harness::bench::{benchmark_compare, reports_csv, BenchConfig};
use enarf_harness::dataset::{make_dataset, Dataset, DatasetConfig};
use enarf_harness::oracle::{oracle_ray, oracle_render};
use enarf_harness::run::{run, Command, RunConfig};
use enarf_harness::scene::{make_synthetic_scene, SceneSpec, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn scene(name: &str) -> SyntheticScene {
    make_synthetic_scene(&SceneSpec::preset(name).unwrap(), 0).unwrap()
}

fn random_pose(k: usize, rng: &mut ChaCha8Rng) -> PoseConfig {
    PoseConfig::new(
        (0..k)
            .map(|_| PosePart {
                length: rng.random_range(0.2..0.5),
                transform: RigidTransform::new(
                    euler_xyz([
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-3.0..3.0),
                    ]),
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ),
                )
                .unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

fn ac1_linear_forms() -> Check {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=4 {
        let mut b = ok(NarfBaseline::random(
            k,
            PosEncConfig::default(),
            10 + k as u64,
        ))?;
        for w in &mut b.linear {
            *w = rng.random_range(-1.0..1.0);
        }
        let pose = random_pose(k, &mut rng);
        for _ in 0..1000 {
            let x = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let a = ok(narf_baseline_feature(
                &x,
                &pose,
                &b,
                LinearForm::Concatenated,
            ))?;
            let d = ok(narf_baseline_feature(&x, &pose, &b, LinearForm::Decomposed))?;
            for (u, v) in a.iter().zip(&d) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    ensure(
        worst < 1e-10,
        format!("max |concatenated − decomposed| = {worst:.2e} over K = 1..4 × 1000 points"),
    )
}

const FD_STEP: f64 = 1e-5;
const FD_COORDS: usize = 200;

/// Max relative error on coordinates drawn from the gradient's support,
/// topped up with uniform draws when the support is small.
/// Max relative error over coordinates drawn from the nonzero entries of `pool`.
fn fd_error(
    params: &[f64],
    analytic: &[f64],
    pool: &[f64],
    seed: u64,
    loss: impl FnMut(&[f64]) -> f64,
) -> Result<f64, String> {
    let support: Vec<usize> = (0..pool.len()).filter(|&i| pool[i] != 0.0).collect();
    if support.is_empty() {
        return Err("analytic gradient is identically zero".into());
    }
    let mut coords: Vec<usize> = random_coords(support.len(), FD_COORDS, seed)
        .into_iter()
        .map(|i| support[i])
        .collect();
    if coords.len() < FD_COORDS {
        let extra = random_coords(params.len(), FD_COORDS - coords.len(), seed + 1);
        coords.extend(extra);
    }
    let r = ok(finite_diff_check_at(
        loss, params, analytic, &coords, FD_STEP,
    ))?;
    if std::env::var("FD_DEBUG").is_ok() {
        let gmax = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        eprintln!(
            "  worst {} analytic {:.6e} (max |g| {gmax:.3e}) err {:.2e}",
            r.worst_index, analytic[r.worst_index], r.max_rel_err
        );
    }
    Ok(r.max_rel_err)
}

fn fd_decode() -> Result<f64, String> {
    let s = DecoderShape {
        feature_dim: FEATURE_CHANNELS,
        view: None,
    };
    let dec = MlpDecoder::random(s, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input: Vec<f64> = (0..s.input_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let np = s.param_count();
    let (wc, wd) = ([0.4, -0.9, 0.6], 0.8);
    let mut all = dec.params.clone();
    all.extend(&input);
    let eval = |v: &[f64]| {
        let r = DecoderRef::new(s, &v[..np]).unwrap();
        let mut c = DecoderCache::new(s.input_dim());
        c.input.copy_from_slice(&v[np..]);
        let o = r.forward(&mut c);
        wc[0] * o.color[0] + wc[1] * o.color[1] + wc[2] * o.color[2] + wd * o.density
    };
    let r = dec.as_ref();
    let mut c = DecoderCache::new(s.input_dim());
    c.input.copy_from_slice(&input);
    r.forward(&mut c);
    let mut g = vec![0.0; np];
    let mut gi = vec![0.0; s.input_dim()];
    r.backward(&c, wc, wd, &mut g, Some(&mut gi));
    g.extend(gi);
    fd_error(&all, &g, &g, 3, eval)
}

fn fd_composite() -> Result<f64, String> {
    let n = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // stratified depths, as the renderer draws them
    let ts: Vec<f64> = (0..n)
        .map(|i| 1.0 + 2.0 * (i as f64 + rng.random_range(0.0..1.0)) / n as f64)
        .collect();
    let far = 3.2;
    let mut v: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    v.extend((0..n).map(|_| rng.random_range(0.0..3.0)));
    let d = Composite {
        rgb: [0.5, -0.3, 0.8],
        mask: -0.6,
        inv_depth: 0.7,
    };
    let split = |v: &[f64]| -> (Vec<[f64; 3]>, Vec<f64>) {
        (
            (0..n)
                .map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]])
                .collect(),
            v[3 * n..].to_vec(),
        )
    };
    let eval = |v: &[f64]| {
        let (c, s) = split(v);
        let o = composite(&ts, &c, &s, far).unwrap();
        (0..3).map(|k| d.rgb[k] * o.rgb[k]).sum::<f64>()
            + d.mask * o.mask
            + d.inv_depth * o.inv_depth
    };
    let (c, s) = split(&v);
    let (dc, ds) = ok(composite_backward(&ts, &c, &s, far, &d))?;
    let mut g: Vec<f64> = dc.iter().flatten().copied().collect();
    g.extend(ds);
    fd_error(&v, &g, &g, 5, eval)
}

fn fd_feature_at() -> Result<f64, String> {
    let sc = scene("capsule3-chain");
    let pose = ok(sc.pose_at(0.3))?;
    let canon = ok(sc.canonical())?;
    let field = ok(TriPlaneField::random(8, 1.0, 3, 0.8, 6))?;
    let opts = FieldOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<Vec3> = (0..30)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    let d: Vec<f64> = (0..FEATURE_CHANNELS)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let nf = field.features.len();
    let mut v = field.features.clone();
    v.extend(&field.probs);
    let mut g = vec![0.0; v.len()];
    for x in &pts {
        let (gf, gp) = ok(feature_at_backward(&field, x, &pose, &canon, &opts, &d))?;
        for (a, b) in g.iter_mut().zip(gf.iter().chain(&gp)) {
            *a += b;
        }
    }
    let mut work = field.clone();
    let eval = |v: &[f64]| {
        work.features.copy_from_slice(&v[..nf]);
        work.probs.copy_from_slice(&v[nf..]);
        pts.iter()
            .map(|x| {
                let f = feature_at(&work, x, &pose, &canon, &opts).unwrap();
                f.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    };
    fd_error(&v, &g, &g, 8, eval)
}

fn fd_bone_loss() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 16;
    let mask = Image::from_vec(
        n,
        n,
        1,
        (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let bones = Image::from_vec(
        n,
        n,
        1,
        (0..n * n)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let g = ok(bone_loss_grad(&mask, &bones))?;
    let eval =
        |v: &[f64]| bone_loss(&Image::from_vec(n, n, 1, v.to_vec()).unwrap(), &bones).unwrap();
    fd_error(&mask.data, &g.data, &g.data, 10, eval)
}

fn fd_dso_loss() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 60;
    let v: Vec<f64> = (0..4 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let tgt: Vec<RayTarget> = (0..n)
        .map(|_| RayTarget {
            rgb: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
            mask: rng.random_range(0.0..1.0),
        })
        .collect();
    let comps = |v: &[f64]| -> Vec<Composite> {
        (0..n)
            .map(|i| Composite {
                rgb: [v[4 * i], v[4 * i + 1], v[4 * i + 2]],
                mask: v[4 * i + 3],
                inv_depth: 0.0,
            })
            .collect()
    };
    let g: Vec<f64> = ok(dso_loss_grad(&comps(&v), &tgt))?
        .iter()
        .flat_map(|c| [c.rgb[0], c.rgb[1], c.rgb[2], c.mask])
        .collect();
    fd_error(&v, &g, &g, 12, |v| dso_loss(&comps(v), &tgt).unwrap())
}

/// Render → DSO + L2 objective of a few pixels, with fine samples frozen at
/// the positions the forward pass drew.
fn fd_pipeline(variant: Variant) -> Result<f64, String> {
    let sc = scene("capsule2");
    let model = ok(Model::new(
        ModelConfig {
            variant,
            resolution: 16,
            ..Default::default()
        },
        ok(sc.canonical())?,
    ))?;
    let mut params = model.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for v in &mut params.values {
        *v += rng.random_range(-0.05..0.05);
    }
    // trained-scale features; near-zero ones crowd decoder kinks around the probe
    if let Ok(f) = params.slice_mut("triplane.features") {
        for v in f.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    if let Ok(w2) = params.slice_mut("deform.w2") {
        for v in w2.iter_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let time = 0.4;
    let pose = ok(sc.pose_at(time))?;
    let dcfg = DatasetConfig {
        resolution: 24,
        ..Default::default()
    };
    let camera = ok(dcfg.camera(0.7))?;
    let target = ok(oracle_render(&sc, &pose, time, &camera, 256))?;
    let mut pixels: Vec<usize> = (0..camera.width * camera.height)
        .filter(|&p| target.mask.data[p] > 0.5)
        .collect();
    pixels.truncate(40);
    pixels.extend((0..8).map(|i| i * 71 % (camera.width * camera.height)));
    let targets: Vec<RayTarget> = pixels
        .iter()
        .map(|&p| RayTarget {
            rgb: [
                target.rgb.data[3 * p],
                target.rgb.data[3 * p + 1],
                target.rgb.data[3 * p + 2],
            ],
            mask: target.mask.data[p],
        })
        .collect();
    let rays = generate_rays(&camera);
    let tasks: Vec<RayTask> = pixels
        .iter()
        .map(|&p| RayTask {
            pixel: p as u64,
            ray: rays[p],
        })
        .collect();
    let cfg = RenderConfig::default();
    let seed = 17;
    let lambda = 1e-2;
    let n = pixels.len() as f64;
    let field = ok(model.prepare(&params.values, &pose, time))?;
    let bg = batch_gradient(&field, &tasks, &cfg, seed, |i, c| {
        dso_ray_grad(c, &targets[i], 2.0 / n)
    });
    let (comps, tlists, _) = ok(render_pixels(&camera, &field, &pixels, &cfg, seed))?;
    if comps != bg.outputs {
        return Err("batch forward differs from pixel render".into());
    }
    // probe coordinates the render touches, not ones only the L2 term reaches
    let render_grad = bg.grad.values;
    let mut grad = render_grad.clone();
    let l2_range = params.layout.prefix_range("triplane.features");
    if let Some(r) = &l2_range {
        l2_with_grad(&params.values[r.clone()], lambda, &mut grad[r.clone()]);
    }
    let eval = |v: &[f64]| {
        let f = model.prepare(v, &pose, time).unwrap();
        let c = render_pixels_fixed(&camera, &f, &pixels, &tlists).unwrap();
        let l2 = l2_range.as_ref().map_or(0.0, |r| {
            v[r.clone()].iter().map(|x| x * x).sum::<f64>() / r.len() as f64
        });
        dso_loss(&c, &targets).unwrap() + lambda * l2
    };
    fd_error(&params.values, &grad, &render_grad, 19, eval)
}

fn ac2_gradients() -> Check {
    let ops: [(&str, fn() -> Result<f64, String>); 5] = [
        ("decode", fd_decode),
        ("composite", fd_composite),
        ("feature_at", fd_feature_at),
        ("bone_loss", fd_bone_loss),
        ("dso_loss", fd_dso_loss),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, f) in ops {
        let e = f()?;
        pass &= e < 1e-5;
        parts.push(format!("{name} {e:.1e}"));
    }
    let e = fd_pipeline(Variant::Enarf)?;
    pass &= e < 1e-4;
    parts.push(format!("pipeline {e:.1e}"));
    // other variants are reported, not gated: warp kinks and ulp-level loss
    // noise can exceed the bound at a step of 1e-5 without a gradient error
    let mut others = Vec::new();
    for v in Variant::ALL.into_iter().filter(|v| *v != Variant::Enarf) {
        others.push(format!("{v} {:.1e}", fd_pipeline(v)?));
    }
    ensure(
        pass,
        format!(
            "max rel err (ops < 1e-5, pipeline < 1e-4): {}; other variants {}",
            parts.join(", "),
            others.join(", ")
        ),
    )
}

fn ac3_oracle() -> Check {
    let samples = 512;
    let mut worst_slab = 0.0f64;
    // one or two homogeneous slabs filling the ray, 512 uniform samples
    for (sigma, len) in [(0.5, 2.0), (2.0, 1.0), (8.0, 0.7)] {
        let near = 1.0;
        let far = near + len;
        let ts: Vec<f64> = (0..samples)
            .map(|i| near + len * i as f64 / samples as f64)
            .collect();
        let c = ok(composite(
            &ts,
            &vec![[0.2, 0.5, 0.9]; samples],
            &vec![sigma; samples],
            far,
        ))?;
        let t = (-sigma * len).exp();
        worst_slab = worst_slab.max((c.mask - (1.0 - t)).abs());
        worst_slab = worst_slab.max((c.rgb[1] - 0.5 * (1.0 - t)).abs());
        let half = samples / 2;
        let (s1, s2) = (sigma, 0.5 * sigma);
        let sig: Vec<f64> = (0..samples)
            .map(|i| if i < half { s1 } else { s2 })
            .collect();
        let col: Vec<[f64; 3]> = (0..samples)
            .map(|i| if i < half { [1.0; 3] } else { [0.0, 1.0, 0.0] })
            .collect();
        let c = ok(composite(&ts, &col, &sig, far))?;
        let (t1, t2) = ((-s1 * len / 2.0).exp(), (-s2 * len / 2.0).exp());
        worst_slab = worst_slab.max((c.rgb[0] - (1.0 - t1)).abs());
        worst_slab = worst_slab.max((c.rgb[1] - (1.0 - t1) - t1 * (1.0 - t2)).abs());
        worst_slab = worst_slab.max((c.mask - (1.0 - t1 * t2)).abs());
    }

    // capsule chords: across the shaft, along the axis and through a cap
    let (r, length, sigma) = (0.1, 0.35, 30.0);
    let pose = ok(PoseConfig::new(vec![PosePart {
        length,
        transform: ok(RigidTransform::new(
            euler_xyz([0.3, -0.5, 0.9]),
            Vec3::new(0.1, -0.2, 0.05),
        ))?,
    }]))?;
    let (a, b) = pose.bone_segment(0);
    let u = (b - a).normalize();
    let v = u.cross(&Vec3::new(0.3, 0.8, -0.1)).normalize();
    let w = u.cross(&v);
    let mid = 0.5 * (a + b);
    let mut cases: Vec<(Vec3, Vec3, f64)> = vec![(a - 3.0 * u, u, length + 2.0 * r)];
    for d in [0.0, 0.03, 0.07, 0.095] {
        cases.push((mid + d * w - 3.0 * v, v, 2.0 * (r * r - d * d).sqrt()));
    }
    for e in [0.02, 0.06, 0.09] {
        cases.push((b + e * u - 3.0 * v, v, 2.0 * (r * r - e * e).sqrt()));
    }
    let mut worst_chord = 0.0f64;
    for (o, d, chord) in cases {
        let ray = ok(Ray::new(o, d, 1.0, 5.0))?;
        let c = ok(oracle_ray(
            &ray,
            &pose,
            &[r],
            &[[0.3, 0.6, 0.9]],
            sigma,
            samples,
        ))?;
        let expect = 1.0 - (-sigma * chord).exp();
        worst_chord = worst_chord.max((c.mask - expect).abs());
        worst_chord = worst_chord.max((c.rgb[2] - 0.9 * expect).abs());
    }

    // cube culling against brute force at 64×64
    let sc = scene("capsule2");
    let camera = ok(DatasetConfig::default().camera(0.9))?;
    let pose = ok(sc.pose_at(0.5))?;
    let mut worst_cull = 0.0f64;
    let mut culled = 0;
    for variant in [Variant::Enarf, Variant::DEnarf, Variant::NoSelector] {
        let model = ok(Model::new(
            ModelConfig {
                variant,
                ..Default::default()
            },
            ok(sc.canonical())?,
        ))?;
        let params = model.init_params(5);
        let field = ok(model.prepare(&params.values, &pose, 0.5))?;
        let on = ok(render_image(&camera, &field, &RenderConfig::default(), 3))?;
        let off_cfg = RenderConfig {
            cull: false,
            ..Default::default()
        };
        let off = ok(render_image(&camera, &field, &off_cfg, 3))?;
        culled += on.stats.culled_rays;
        for (x, y) in [
            (&on.rgb, &off.rgb),
            (&on.mask, &off.mask),
            (&on.inv_depth, &off.inv_depth),
        ] {
            for (p, q) in x.data.iter().zip(&y.data) {
                worst_cull = worst_cull.max((p - q).abs());
            }
        }
    }
    ensure(
        worst_slab < 1e-3 && worst_chord < 1e-3 && worst_cull <= 1e-6 && culled > 0,
        format!(
            "slab err {worst_slab:.1e}, capsule chord err {worst_chord:.1e}, cull vs brute force {worst_cull:.1e} ({culled} rays culled)"
        ),
    )
}

fn desk_config() -> TrainConfig {
    let mut c = TrainConfig {
        batch: 512,
        iters: 5000,
        eval_every: 0,
        ..Default::default()
    };
    c.adam.lr = 1e-2;
    c
}

struct Fit {
    model: Model,
    params: Vec<f64>,
    view_psnr: f64,
    view_ssim: f64,
    pose_psnr: f64,
    seconds: f64,
}

fn fit(sc: &SyntheticScene, data: &Dataset, variant: Variant) -> Result<Fit, String> {
    let model = ok(Model::new(
        ModelConfig {
            variant,
            ..Default::default()
        },
        ok(sc.canonical())?,
    ))?;
    let cfg = desk_config();
    let t = Instant::now();
    let mut tr = ok(Trainer::new(
        &model,
        &data.train,
        &data.novel_view,
        cfg.clone(),
    ))?;
    ok(tr.run())?;
    let seconds = t.elapsed().as_secs_f64();
    let view = ok(evaluate(
        &model,
        &tr.params.values,
        &data.novel_view,
        &cfg.render,
        0,
    ))?;
    let pose = ok(evaluate(
        &model,
        &tr.params.values,
        &data.novel_pose,
        &cfg.render,
        0,
    ))?;
    let params = tr.params.values.clone();
    eprintln!(
        "  {variant} on {}: novel view {:.2} dB / SSIM {:.4}, novel pose {:.2} dB, {seconds:.0}s",
        sc.name, view.psnr, view.ssim, pose.psnr
    );
    Ok(Fit {
        model,
        params,
        view_psnr: view.psnr,
        view_ssim: view.ssim,
        pose_psnr: pose.psnr,
        seconds,
    })
}

fn capsule_dataset(name: &str) -> Result<(SyntheticScene, Dataset), String> {
    let sc = scene(name);
    let data = ok(make_dataset(&sc, &DatasetConfig::default()))?;
    Ok((sc, data))
}

struct Quality {
    enarf: Option<Fit>,
}

fn ac4_quality(q: &mut Quality) -> Check {
    let (sc, data) = capsule_dataset("capsule2")?;
    let f = fit(&sc, &data, Variant::Enarf)?;
    let detail = format!(
        "capsule2 64×64, 4 views, 5000 iters: novel view {:.2} dB (≥ 28) SSIM {:.4} (≥ 0.92), novel pose {:.2} dB (≥ 25), {:.0}s",
        f.view_psnr, f.view_ssim, f.pose_psnr, f.seconds
    );
    let pass = f.view_psnr >= 28.0 && f.view_ssim >= 0.92 && f.pose_psnr >= 25.0;
    q.enarf = Some(f);
    ensure(pass, detail)
}

fn ac5_selector(q: &mut Quality) -> Check {
    let (sc, data) = capsule_dataset("capsule2")?;
    if q.enarf.is_none() {
        q.enarf = Some(fit(&sc, &data, Variant::Enarf)?);
    }
    let ns = fit(&sc, &data, Variant::NoSelector)?;
    let e = q.enarf.as_ref().unwrap();
    let gap = e.view_psnr - ns.view_psnr;
    ensure(
        gap >= 1.0,
        format!(
            "novel view enarf {:.2} dB vs no-selector {:.2} dB, gap {gap:.2} dB (≥ 1)",
            e.view_psnr, ns.view_psnr
        ),
    )
}

fn same_bits(a: &RenderOutput, b: &RenderOutput) -> bool {
    let eq = |x: &Image, y: &Image| {
        x.data
            .iter()
            .zip(&y.data)
            .all(|(p, q)| p.to_bits() == q.to_bits())
    };
    eq(&a.rgb, &b.rgb) && eq(&a.mask, &b.mask) && eq(&a.inv_depth, &b.inv_depth)
}

fn ac6_deformation() -> Check {
    let (sc, data) = capsule_dataset("capsule2-wobble")?;
    let e = fit(&sc, &data, Variant::Enarf)?;

    // zero deformation: trained ENARF weights inside a D-ENARF model
    let d_model = ok(Model::new(
        ModelConfig {
            variant: Variant::DEnarf,
            ..Default::default()
        },
        ok(sc.canonical())?,
    ))?;
    let mut dp = d_model.init_params(0).values;
    dp[..e.params.len()].copy_from_slice(&e.params);
    let cfg = RenderConfig::default();
    let mut identical = true;
    for fr in data
        .novel_view
        .iter()
        .step_by(4)
        .chain(data.novel_pose.iter().step_by(4))
    {
        let fe = ok(e.model.prepare(&e.params, &fr.pose, fr.time))?;
        let fd = ok(d_model.prepare(&dp, &fr.pose, fr.time))?;
        let a = ok(render_image(&fr.camera, &fe, &cfg, 1))?;
        let b = ok(render_image(&fr.camera, &fd, &cfg, 1))?;
        identical &= same_bits(&a, &b);
    }

    let d = fit(&sc, &data, Variant::DEnarf)?;
    let gap = d.view_psnr - e.view_psnr;
    ensure(
        identical && gap >= 0.5,
        format!(
            "zero deformation bit-identical: {identical}; wobble novel view d-enarf {:.2} dB vs enarf {:.2} dB, gap {gap:.2} dB (≥ 0.5); novel pose {:.2} vs {:.2} dB",
            d.view_psnr, e.view_psnr, d.pose_psnr, e.pose_psnr
        ),
    )
}

fn ac7_efficiency() -> Check {
    let sc = scene("humanoid9");
    let dcfg = DatasetConfig {
        resolution: 128,
        ..DatasetConfig::for_scene("humanoid9")
    };
    let camera = ok(dcfg.camera(0.5))?;
    let pose = ok(sc.pose_at(0.5))?;
    let cfg = BenchConfig {
        repetitions: 3,
        ..Default::default()
    };
    let k = sc.parts();
    let spr = cfg.render.samples_per_ray();
    let variants = [Variant::Enarf, Variant::MlpSelector, Variant::BaselineNarf];
    let r = ok(benchmark_compare(&variants, &sc, &pose, &camera, &cfg))?;
    eprint!("{}", reports_csv(&r));
    let (e, m, b) = (&r[0], &r[1], &r[2]);
    let flop_ratio = b.flops / e.flops;
    let time_ratio = b.seconds / e.seconds;
    let between =
        e.flops < m.flops && m.flops < b.flops && e.seconds < m.seconds && m.seconds < b.seconds;
    ensure(
        k == 9 && spr == 112 && flop_ratio >= 20.0 && time_ratio >= 2.0 && between,
        format!(
            "128×128, K={k}, {spr} samples/ray, {} threads: flops {:.3e} / {:.3e} / {:.3e} (ratio {flop_ratio:.1}×), seconds {:.3} / {:.3} / {:.3} (ratio {time_ratio:.1}×), mlp-selector between: {between}",
            e.threads, e.flops, m.flops, b.flops, e.seconds, m.seconds, b.seconds
        ),
    )
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Independent SSIM: separable Gaussian filtering of the moment maps.
fn ssim_separable(x: &Image, y: &Image) -> f64 {
    let g: Vec<f64> = {
        let raw: Vec<f64> = (0..11)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let (w, h, ch) = (x.width, x.height, x.channels);
    let (ow, oh) = (w - 10, h - 10);
    let filter = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; ow * h];
        for yy in 0..h {
            for ox in 0..ow {
                rows[yy * ow + ox] = (0..11).map(|d| g[d] * f(yy * w + ox + d)).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for oy in 0..oh {
            for ox in 0..ow {
                out[oy * ow + ox] = (0..11).map(|d| g[d] * rows[(oy + d) * ow + ox]).sum();
            }
        }
        out
    };
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..ch {
        let px = |i: usize| x.data[i * ch + c];
        let py = |i: usize| y.data[i * ch + c];
        let mx = filter(&px);
        let my = filter(&py);
        let xx = filter(&|i| px(i) * px(i));
        let yy = filter(&|i| py(i) * py(i));
        let xy = filter(&|i| px(i) * py(i));
        for i in 0..ow * oh {
            let (vx, vy, cv) = (
                xx[i] - mx[i] * mx[i],
                yy[i] - my[i] * my[i],
                xy[i] - mx[i] * my[i],
            );
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cv + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
    }
    total / (ow * oh * ch) as f64
}

fn loss_examples() -> Result<Vec<String>, String> {
    let mut fails = Vec::new();
    let mut check = |name: &str, okay: bool| {
        if !okay {
            fails.push(name.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // dso_loss
    let p = Composite {
        rgb: [0.2, 0.4, 0.6],
        mask: 0.7,
        inv_depth: 0.0,
    };
    let t = RayTarget {
        rgb: p.rgb,
        mask: p.mask,
    };
    check("dso pred == target", ok(dso_loss(&[p], &[t]))? == 0.0);
    let off = RayTarget {
        rgb: [0.3, 0.4, 0.6],
        mask: 0.7,
    };
    check(
        "dso one channel off by 0.1",
        close(ok(dso_loss(&[p], &[off]))?, 0.01, 1e-12),
    );
    let preds: Vec<Composite> = (0..50)
        .map(|_| Composite {
            rgb: [rng.random(), rng.random(), rng.random()],
            mask: rng.random(),
            inv_depth: 0.0,
        })
        .collect();
    let tgts: Vec<RayTarget> = (0..50)
        .map(|_| RayTarget {
            rgb: [rng.random(), rng.random(), rng.random()],
            mask: rng.random(),
        })
        .collect();
    let mut naive = 0.0;
    for i in 0..50 {
        for c in 0..3 {
            naive += (preds[i].rgb[c] - tgts[i].rgb[c]) * (preds[i].rgb[c] - tgts[i].rgb[c]);
        }
        naive += (preds[i].mask - tgts[i].mask) * (preds[i].mask - tgts[i].mask);
    }
    check(
        "dso naive oracle",
        close(ok(dso_loss(&preds, &tgts))?, naive / 50.0, 1e-12),
    );

    // bone_loss
    let n = 9;
    let bones = Image::from_vec(
        n,
        n,
        1,
        (0..n * n)
            .map(|i| if i % 4 == 1 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let mut on_bones = |v: f64| {
        let mut m = Image::from_vec(
            n,
            n,
            1,
            (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        for i in 0..n * n {
            if bones.data[i] == 1.0 {
                m.data[i] = v;
            }
        }
        m
    };
    let m1 = on_bones(1.0);
    let mh = on_bones(0.5);
    check("bone M = 1 on bones", ok(bone_loss(&m1, &bones))? == 0.0);
    check(
        "bone M = 0 everywhere",
        ok(bone_loss(&Image::zeros(n, n, 1), &bones))? == 1.0,
    );
    check("bone M = 0.5 on bones", ok(bone_loss(&mh, &bones))? == 0.25);
    check(
        "bone empty B",
        ok(bone_loss(&mh, &Image::zeros(n, n, 1)))? == 0.0,
    );

    // adversarial_losses
    let (lg, ld) = adversarial_losses(&[0.5], &[0.5]);
    check(
        "adversarial one-half",
        close(lg, 2f64.ln(), 1e-12) && close(ld, 2.0 * 2f64.ln(), 1e-12),
    );
    let (lg1, _) = adversarial_losses(&[0.5], &[1.0 - 1e-9]);
    check("adversarial d_fake → 1", lg1 < 1e-6);
    let real: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
    let fake: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
    let (lg, ld) = adversarial_losses(&real, &fake);
    let mut eg = 0.0;
    let mut ed = 0.0;
    for i in 0..20 {
        eg -= fake[i].ln();
        ed -= real[i].ln() + (1.0 - fake[i]).ln();
    }
    check(
        "adversarial naive oracle",
        close(lg, eg / 20.0, 1e-12) && close(ld, ed / 20.0, 1e-12),
    );

    // r1_penalty
    let imgs: Vec<Image> = (0..3)
        .map(|_| Image::from_vec(4, 4, 3, (0..48).map(|_| rng.random()).collect()).unwrap())
        .collect();
    let constant = LinearDiscriminator {
        weights: vec![0.0; 48],
        bias: 0.7,
    };
    check("r1 constant D", r1_penalty(&constant, &imgs) == 0.0);
    let sum = LinearDiscriminator {
        weights: vec![1.0; 48],
        bias: 0.0,
    };
    check("r1 D = Σ pixels", r1_penalty(&sum, &imgs) == 48.0);
    let lin = LinearDiscriminator {
        weights: (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: 0.1,
    };
    let w2: f64 = lin.weights.iter().map(|w| w * w).sum();
    check("r1 linear D", close(r1_penalty(&lin, &imgs), w2, 1e-9));

    // psnr and ssim
    let a = Image::from_vec(
        16,
        16,
        3,
        (0..768).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    check("ssim identical", ok(ssim(&a, &a))? == 1.0);
    let mut b = a.clone();
    for (i, v) in b.data.iter_mut().enumerate() {
        *v += if i % 2 == 0 { 0.1 } else { -0.1 };
    }
    check("psnr MSE 0.01", close(ok(psnr(&b, &a))?, 20.0, 1e-9));
    check("psnr identical capped", ok(psnr(&a, &a))? == 99.0);
    let c = Image::from_vec(
        16,
        16,
        3,
        (0..768).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    check(
        "ssim reference",
        close(ok(ssim(&a, &c))?, ssim_separable(&a, &c), 1e-6),
    );
    Ok(fails)
}

/// Ten alternating generator/discriminator steps with a rendered generator,
/// a linear discriminator, bone loss and R1.
fn gan_smoke() -> Result<(f64, f64), String> {
    let sc = scene("capsule2");
    let res = 12;
    let dcfg = DatasetConfig {
        resolution: res,
        ..Default::default()
    };
    let camera: Camera = ok(dcfg.camera(0.4))?;
    let bg = Image::filled(res, res, 3, 0.3);
    let reals: Vec<Image> = [0.2, 0.7]
        .iter()
        .map(|&t| {
            let out = oracle_render(&sc, &sc.pose_at(t).unwrap(), t, &camera, 64).unwrap();
            composite_background(&out, &bg).unwrap()
        })
        .collect();
    let model = ok(Model::new(
        ModelConfig {
            resolution: 8,
            ..Default::default()
        },
        ok(sc.canonical())?,
    ))?;
    let mut params = model.init_params(1);
    let mut adam = AdamState::new(Default::default(), params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut disc = LinearDiscriminator {
        weights: (0..res * res * 3)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect(),
        bias: 0.0,
    };
    let render = RenderConfig {
        coarse: 16,
        fine: 16,
        cull: true,
    };
    let (lambda_bone, lambda_r1) = (1.0, 10.0);
    let mut min_norm = f64::INFINITY;
    let mut last = 0.0;
    for step in 0..10 {
        let t = 0.05 + 0.09 * step as f64;
        let pose = ok(sc.pose_at(t))?;
        let mut session = RenderSession::new(&model, camera.clone(), pose.clone(), t, render, step);
        let out = ok(session.forward(&params.values))?.clone();
        let fake = ok(composite_background(&out, &bg))?;
        let s_fake = disc.score(&fake);
        let s_real: Vec<f64> = reals.iter().map(|x| disc.score(x)).collect();
        let (lg, ld) = adversarial_losses(&s_real, &[s_fake]);
        let r1 = r1_penalty(&disc, &reals);
        let bones = ok(rasterize_bones(&pose, &sc.skeleton, &camera))?;
        let lb = ok(bone_loss(&out.mask, &bones))?;
        if ![lg, ld, r1, lb].iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite loss at step {step}"));
        }

        // generator: L_G + λ_bone L_bone through the background composite
        let d_score = generator_loss_grad(&[s_fake])[0] * s_fake * (1.0 - s_fake);
        let d_fake = disc.input_grad(&fake);
        let d_rgb = Image::from_vec(
            res,
            res,
            3,
            d_fake.data.iter().map(|g| g * d_score).collect(),
        )
        .unwrap();
        let bone_grad = ok(bone_loss_grad(&out.mask, &bones))?;
        let d_mask = Image::from_vec(
            res,
            res,
            1,
            (0..res * res)
                .map(|i| {
                    -(0..3)
                        .map(|c| d_rgb.data[3 * i + c] * bg.data[3 * i + c])
                        .sum::<f64>()
                        + lambda_bone * bone_grad.data[i]
                })
                .collect(),
        )
        .unwrap();
        let g = ok(session.backward(&d_rgb, &d_mask, None))?;
        if !g.values.iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite generator gradient at step {step}"));
        }
        let norm = g.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        min_norm = min_norm.min(norm);
        ok(adam_step(&mut params, &g, &mut adam))?;

        // discriminator: L_D + (λ_R1 / 2) E‖∇D‖², plain gradient descent
        let lr = 1e-2;
        let mut dw = vec![0.0; disc.weights.len()];
        let mut db = 0.0;
        for (x, s) in reals.iter().zip(&s_real) {
            let k = -(1.0 - s) / reals.len() as f64;
            db += k;
            for (d, v) in dw.iter_mut().zip(&x.data) {
                *d += k * v;
            }
        }
        db += s_fake;
        for (d, v) in dw.iter_mut().zip(&fake.data) {
            *d += s_fake * v;
        }
        for (w, d) in disc.weights.iter_mut().zip(&dw) {
            *w -= lr * (d + lambda_r1 * *w);
        }
        disc.bias -= lr * db;
        last = lg + ld + lambda_r1 / 2.0 * r1 + lambda_bone * lb;
    }
    Ok((min_norm, last))
}

fn ac8_losses() -> Check {
    let fails = loss_examples()?;
    let (norm, total) = gan_smoke()?;
    ensure(
        fails.is_empty() && norm > 0.0 && total.is_finite(),
        format!(
            "loss examples failing: {:?}; GAN smoke 10 steps: min generator grad norm {norm:.3e}, final total loss {total:.4}",
            fails
        ),
    )
}

fn compare_dirs(a: &Path, b: &Path, files: &[String]) -> Vec<String> {
    files
        .iter()
        .filter(|f| *f != "manifest.json" && *f != "timing.csv")
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .cloned()
        .collect()
}

fn ac9_determinism() -> Check {
    let root = ok(tempfile::tempdir())?;
    let base = RunConfig {
        dataset: Some(DatasetConfig {
            resolution: 32,
            frames: 10,
            oracle_samples: 128,
            ..Default::default()
        }),
        model: ModelConfig {
            resolution: 32,
            ..Default::default()
        },
        train: TrainConfig {
            batch: 256,
            iters: 40,
            eval_every: 20,
            ..Default::default()
        },
        variant: Variant::DEnarf,
        seed: 7,
        ..Default::default()
    };
    let mut compared = 0;
    let mut diffs = Vec::new();
    let mut commands = vec![
        (Command::TrainDso, base.clone()),
        (
            Command::SamplePose,
            RunConfig {
                count: 4,
                ..base.clone()
            },
        ),
        (Command::MakeScene, base.clone()),
        (
            Command::Render,
            RunConfig {
                oracle: true,
                ..base.clone()
            },
        ),
    ];
    let ck = root.path().join("0-train-dso-t1").join("checkpoint.bin");
    commands.push((
        Command::Render,
        RunConfig {
            checkpoint: Some(ck.clone()),
            ..base.clone()
        },
    ));
    commands.push((
        Command::Eval,
        RunConfig {
            checkpoint: Some(ck.clone()),
            ..base.clone()
        },
    ));
    for (i, (cmd, cfg)) in commands.into_iter().enumerate() {
        let first = RunConfig {
            threads: 1,
            out: root.path().join(format!("{i}-{}-t1", cmd.name())),
            ..cfg
        };
        let m = ok(run(cmd, &first))?;
        // rerun from the manifest at other thread counts
        let mut again = ok(RunConfig::load(&first.out.join("manifest.json")))?;
        if again != first {
            diffs.push(format!("{} manifest does not round-trip", cmd.name()));
        }
        for threads in [2, 4] {
            again.threads = threads;
            again.out = root.path().join(format!("{i}-{}-t{threads}", cmd.name()));
            let m2 = ok(run(cmd, &again))?;
            if m2.outputs != m.outputs {
                diffs.push(format!("{} output lists differ", cmd.name()));
            }
            compared += m.outputs.len();
            diffs.extend(
                compare_dirs(&first.out, &again.out, &m.outputs)
                    .into_iter()
                    .map(|f| format!("{}:{f}@{threads}", cmd.name())),
            );
        }
    }
    // checkpoints reload to the same bytes
    let loaded = ok(Checkpoint::load(&ck))?;
    let bytes = ok(std::fs::read(&ck))?;
    if ok(loaded.to_bytes(Dtype::F64))? != bytes {
        diffs.push("checkpoint re-serialization".into());
    }
    // the library training loop under different pools
    let sc = scene("capsule2");
    let data = ok(make_dataset(&sc, base.dataset.as_ref().unwrap()))?;
    let logs: Vec<(String, Vec<u8>)> = [1, 3]
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap();
            pool.install(|| {
                let model = Model::new(base.model.clone(), sc.canonical().unwrap()).unwrap();
                let frames: Vec<Frame> = data.train.clone();
                let mut tr =
                    Trainer::new(&model, &frames, &data.novel_view, base.train.clone()).unwrap();
                tr.run().unwrap();
                let ck = Checkpoint::new(&model, tr.params.clone(), Some(tr.adam.clone())).unwrap();
                (tr.log.to_csv(), ck.to_bytes(Dtype::F64).unwrap())
            })
        })
        .collect();
    if logs[0] != logs[1] {
        diffs.push("trainer log or checkpoint across pools".into());
    }
    ensure(
        diffs.is_empty(),
        format!(
            "{compared} output files compared across 1, 2 and 4 threads; mismatches: {diffs:?}"
        ),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("ENARF_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut quality = Quality { enarf: None };
    let criteria: [(u32, &str); 9] = [
        (1, "linear-form equivalence"),
        (2, "gradient correctness"),
        (3, "rendering oracle"),
        (4, "desk-scale reconstruction"),
        (5, "selector ablation"),
        (6, "deformation consistency"),
        (7, "efficiency"),
        (8, "loss suite and GAN smoke"),
        (9, "determinism"),
    ];
    let mut failed = 0;
    for (n, name) in criteria {
        if !want(n) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| match n {
            1 => ac1_linear_forms(),
            2 => ac2_gradients(),
            3 => ac3_oracle(),
            4 => ac4_quality(&mut quality),
            5 => ac5_selector(&mut quality),
            6 => ac6_deformation(),
            7 => ac7_efficiency(),
            8 => ac8_losses(),
            _ => ac9_determinism(),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("AC{n} {tag} {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
