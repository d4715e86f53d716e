//! Analytic ground-truth rendering of capsule scenes.
//!
//! Every ray is intersected exactly with each capsule. The ray segment is cut
//! into uniform bins and each bin receives the density that reproduces its
//! exact optical depth (`σ₀ · covered length / bin length`) and the
//! length-weighted color of the parts covering it. The bins then go through
//! the engine's own compositing quadrature, so transmittance is exact at any
//! sample count and colors converge as bins shrink.

use enarf::kinematics::{Camera, PoseConfig, Vec3};
use enarf::renderer::{composite, generate_rays, Composite, Ray, RenderOutput};
use enarf::{Error, Result};
use rayon::prelude::*;

use crate::scene::SyntheticScene;

/// Parameter interval `[t0, t1]` where the line `o + t d` (unit `d`) lies
/// inside the capsule around segment `a`–`b` with radius `r`.
pub fn capsule_interval(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, r: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut merge = |iv: Option<(f64, f64)>| {
        if let Some((s, e)) = iv {
            lo = lo.min(s);
            hi = hi.max(e);
        }
    };
    merge(sphere_interval(o, d, a, r));
    merge(sphere_interval(o, d, b, r));
    merge(cylinder_interval(o, d, a, b, r));
    (lo <= hi).then_some((lo, hi))
}

fn sphere_interval(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<(f64, f64)> {
    let oc = o - c;
    let bq = oc.dot(d);
    let disc = bq * bq - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-bq - s, -bq + s))
}

/// Finite cylinder without caps: within radius of the axis line and with
/// axial projection inside the segment.
fn cylinder_interval(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, r: f64) -> Option<(f64, f64)> {
    let axis = b - a;
    let len = axis.norm();
    if len == 0.0 {
        return None;
    }
    let u = axis / len;
    let oa = o - a;
    // radial components
    let dp = d - u * d.dot(&u);
    let op = oa - u * oa.dot(&u);
    let qa = dp.norm_squared();
    let qb = op.dot(&dp);
    let qc = op.norm_squared() - r * r;
    let (mut t0, mut t1) = if qa < 1e-14 {
        if qc > 0.0 {
            return None;
        }
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let disc = qb * qb - qa * qc;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        ((-qb - s) / qa, (-qb + s) / qa)
    };
    // axial slab 0 ≤ (oa + t d)·u ≤ len
    let h0 = oa.dot(&u);
    let hd = d.dot(&u);
    if hd.abs() < 1e-14 {
        if !(0.0..=len).contains(&h0) {
            return None;
        }
    } else {
        let (s0, s1) = ((0.0 - h0) / hd, (len - h0) / hd);
        t0 = t0.max(s0.min(s1));
        t1 = t1.min(s0.max(s1));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Disjoint covered segments along a ray, each owned by the lowest-index
/// capsule containing it.
pub fn covered_segments(intervals: &[Option<(f64, f64)>]) -> Vec<(f64, f64, usize)> {
    let mut cuts: Vec<f64> = intervals
        .iter()
        .flatten()
        .flat_map(|&(a, b)| [a, b])
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let owner = intervals
            .iter()
            .position(|iv| iv.is_some_and(|(a, b)| a <= mid && mid <= b));
        if let Some(k) = owner {
            match out.last_mut() {
                Some(last) if last.2 == k && last.1 == w[0] => last.1 = w[1],
                _ => out.push((w[0], w[1], k)),
            }
        }
    }
    out
}

/// Renders one ray against the capsules of `pose` with the given radii.
pub fn oracle_ray(
    ray: &Ray,
    pose: &PoseConfig,
    radii: &[f64],
    colors: &[[f64; 3]],
    density: f64,
    samples: usize,
) -> Result<Composite> {
    let intervals: Vec<Option<(f64, f64)>> = (0..pose.len())
        .map(|k| {
            let (a, b) = pose.bone_segment(k);
            capsule_interval(&ray.origin, &ray.direction, &a, &b, radii[k])
        })
        .collect();
    let segs = covered_segments(&intervals);
    if segs.iter().all(|&(a, b, _)| b <= ray.near || a >= ray.far) {
        return Ok(Composite::default());
    }
    let n = samples;
    let step = (ray.far - ray.near) / n as f64;
    let ts: Vec<f64> = (0..n).map(|i| ray.near + step * i as f64).collect();
    let mut sig = vec![0.0; n];
    let mut col = vec![[0.0; 3]; n];
    for &(a, b, k) in &segs {
        let a = a.max(ray.near);
        let b = b.min(ray.far);
        if a >= b {
            continue;
        }
        let first = (((a - ray.near) / step).floor() as usize).min(n - 1);
        let last = (((b - ray.near) / step).ceil() as usize).min(n);
        for i in first..last {
            let lo = ts[i];
            let hi = if i + 1 < n { ts[i + 1] } else { ray.far };
            let cover = (b.min(hi) - a.max(lo)).max(0.0);
            if cover > 0.0 {
                sig[i] += density * cover / (hi - lo);
                for c in 0..3 {
                    col[i][c] += cover * colors[k][c];
                }
            }
        }
    }
    for i in 0..n {
        if sig[i] > 0.0 {
            let hi = if i + 1 < n { ts[i + 1] } else { ray.far };
            let covered = sig[i] * (hi - ts[i]) / density;
            for c in 0..3 {
                col[i][c] /= covered;
            }
        }
    }
    composite(&ts, &col, &sig, ray.far)
}

/// Full-image analytic render of `scene` in `pose` at normalized time `time`
/// (which sets the capsule radii).
pub fn oracle_render(
    scene: &SyntheticScene,
    pose: &PoseConfig,
    time: f64,
    camera: &Camera,
    samples_per_ray: usize,
) -> Result<RenderOutput> {
    camera.validate()?;
    if pose.len() != scene.parts() {
        return Err(Error::Validation(format!(
            "pose has {} parts, scene {}",
            pose.len(),
            scene.parts()
        )));
    }
    if samples_per_ray == 0 {
        return Err(Error::Validation(
            "samples per ray must be at least 1".into(),
        ));
    }
    let radii: Vec<f64> = (0..scene.parts())
        .map(|k| scene.radius_at(k, time))
        .collect();
    let rays = generate_rays(camera);
    let comps = rays
        .par_iter()
        .map(|r| {
            oracle_ray(
                r,
                pose,
                &radii,
                &scene.colors,
                scene.density,
                samples_per_ray,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = RenderOutput::zeros(camera.width, camera.height);
    for (i, c) in comps.iter().enumerate() {
        out.rgb.data[3 * i..3 * i + 3].copy_from_slice(&c.rgb);
        out.mask.data[i] = c.mask;
        out.inv_depth.data[i] = c.inv_depth;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scene, SceneSpec};
    use enarf::kinematics::{PosePart, RigidTransform};

    fn single(length: f64) -> PoseConfig {
        PoseConfig::new(vec![PosePart {
            length,
            transform: RigidTransform::from_translation(Vec3::new(-0.5 * length, 0.0, 0.0)),
        }])
        .unwrap()
    }

    #[test]
    fn capsule_interval_examples() {
        let a = Vec3::new(-0.2, 0.0, 0.0);
        let b = Vec3::new(0.2, 0.0, 0.0);
        // perpendicular through the middle: chord = 2r
        let o = Vec3::new(0.0, -2.0, 0.0);
        let (t0, t1) = capsule_interval(&o, &Vec3::y(), &a, &b, 0.1).unwrap();
        assert!((t0 - 1.9).abs() < 1e-12 && (t1 - 2.1).abs() < 1e-12);
        // along the axis: chord = length + 2r
        let o = Vec3::new(-3.0, 0.0, 0.0);
        let (t0, t1) = capsule_interval(&o, &Vec3::x(), &a, &b, 0.1).unwrap();
        assert!((t1 - t0 - 0.6).abs() < 1e-12);
        // through a cap off-axis
        let o = Vec3::new(0.25, -2.0, 0.0);
        let (t0, t1) = capsule_interval(&o, &Vec3::y(), &a, &b, 0.1).unwrap();
        let half = (0.01f64 - 0.05 * 0.05).sqrt();
        assert!((t1 - t0 - 2.0 * half).abs() < 1e-12);
        // miss
        assert!(capsule_interval(&Vec3::new(0.0, -2.0, 0.5), &Vec3::y(), &a, &b, 0.1).is_none());
    }

    #[test]
    fn overlapping_segments_go_to_lowest_index() {
        let segs = covered_segments(&[Some((1.0, 2.0)), None, Some((1.5, 3.0))]);
        assert_eq!(segs, vec![(1.0, 2.0, 0), (2.0, 3.0, 2)]);
        assert!(covered_segments(&[None, None]).is_empty());
    }

    #[test]
    fn chord_transmittance_matches_closed_form() {
        let pose = single(0.4);
        let ray = Ray::new(Vec3::new(0.0, -2.0, 0.03), Vec3::y(), 1.0, 3.0).unwrap();
        let r = 0.1;
        let chord = 2.0 * (r * r - 0.03f64 * 0.03).sqrt();
        for sigma in [5.0, 20.0] {
            let c = oracle_ray(&ray, &pose, &[r], &[[0.3, 0.6, 0.9]], sigma, 512).unwrap();
            assert!((c.mask - (1.0 - (-sigma * chord).exp())).abs() < 1e-9);
            assert!((c.rgb[1] - 0.6 * c.mask).abs() < 1e-9);
        }
    }

    #[test]
    fn looking_away_gives_empty_mask() {
        let s = make_synthetic_scene(&SceneSpec::preset("capsule2").unwrap(), 0).unwrap();
        let pose = s.pose_at(0.3).unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.0, -3.0, 0.0),
            Vec3::new(0.0, -6.0, 0.0),
            Vec3::z(),
            30.0,
            16,
            16,
            0.5,
            6.0,
        )
        .unwrap();
        let out = oracle_render(&s, &pose, 0.3, &cam, 128).unwrap();
        assert!(out.mask.data.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn doubling_samples_converges() {
        let s = make_synthetic_scene(&SceneSpec::preset("capsule2").unwrap(), 0).unwrap();
        let pose = s.pose_at(0.6).unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.4, -3.0, 0.8),
            Vec3::zeros(),
            Vec3::z(),
            30.0,
            24,
            24,
            1.0,
            5.0,
        )
        .unwrap();
        let a = oracle_render(&s, &pose, 0.6, &cam, 512).unwrap();
        let b = oracle_render(&s, &pose, 0.6, &cam, 1024).unwrap();
        let d = a
            .rgb
            .data
            .iter()
            .zip(&b.rgb.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let dm = a
            .mask
            .data
            .iter()
            .zip(&b.mask.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-3 && dm < 1e-9, "{d} {dm}");
        assert!(a.mask.data.iter().any(|m| *m > 0.99));
    }

    #[test]
    fn shares_the_engine_quadrature() {
        let pose = single(0.4);
        let ray = Ray::new(Vec3::new(0.05, -2.0, 0.0), Vec3::y(), 1.0, 3.0).unwrap();
        let c = oracle_ray(&ray, &pose, &[0.1], &[[1.0, 0.5, 0.2]], 30.0, 64).unwrap();
        let n = 64;
        let step = 2.0 / n as f64;
        let ts: Vec<f64> = (0..n).map(|i| 1.0 + step * i as f64).collect();
        let (t0, t1) = capsule_interval(
            &ray.origin,
            &ray.direction,
            &Vec3::new(-0.2, 0.0, 0.0),
            &Vec3::new(0.2, 0.0, 0.0),
            0.1,
        )
        .unwrap();
        let sig: Vec<f64> = ts
            .iter()
            .map(|&lo| {
                let hi = lo + step;
                30.0 * (t1.min(hi) - t0.max(lo)).max(0.0) / (hi - lo)
            })
            .collect();
        let cols: Vec<[f64; 3]> = sig
            .iter()
            .map(|&s| if s > 0.0 { [1.0, 0.5, 0.2] } else { [0.0; 3] })
            .collect();
        assert_eq!(composite(&ts, &cols, &sig, 3.0).unwrap(), c);
    }
}
