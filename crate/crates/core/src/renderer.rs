//! Ray generation, coarse-to-fine sampling, volumetric compositing and image
//! rendering.
//!
//! Each pixel draws its sampling randomness from its own stream,
//! `ChaCha8(seed)` on stream `pixel_index`, so renders do not depend on the
//! thread count or on the order in which pixels are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::RadianceSample;
use crate::error::{shape, validation, Result};
use crate::image::Image;
use crate::kinematics::{Camera, Vec3};
use crate::model::{PointCache, PreparedField, RenderStats};

/// Padding weight added to every sampling bin, relative to its length.
const BIN_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let r = Self {
            origin,
            direction,
            near,
            far,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(validation("ray direction must be unit length"));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(validation(format!(
                "degenerate ray interval [{}, {}]",
                self.near, self.far
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// One ray per pixel through the pixel center, row-major.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let o = camera.center();
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            rays.push(Ray {
                origin: o,
                direction: camera.pixel_direction(px, py),
                near: camera.near,
                far: camera.far,
            });
        }
    }
    rays
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub coarse: usize,
    pub fine: usize,
    /// Skip rays that miss every part's bounding box (tri-plane variants only).
    pub cull: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            coarse: 48,
            fine: 64,
            cull: true,
        }
    }
}

impl RenderConfig {
    pub fn samples_per_ray(&self) -> usize {
        self.coarse + self.fine
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse == 0 {
            return Err(validation("at least one coarse sample per ray is required"));
        }
        Ok(())
    }
}

/// Composited values of one ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub mask: f64,
    pub inv_depth: f64,
}

/// Per-ray compositing weights `w_i = T_i α_i` and transmittances `T_i`.
#[inline]
fn weights_into(
    ts: &[f64],
    sigmas: impl Fn(usize) -> f64,
    far: f64,
    w: &mut Vec<f64>,
    trans: &mut Vec<f64>,
) {
    let n = ts.len();
    w.clear();
    trans.clear();
    let mut t_acc = 1.0;
    for i in 0..n {
        let delta = if i + 1 < n {
            ts[i + 1] - ts[i]
        } else {
            far - ts[i]
        };
        let tau = sigmas(i) * delta;
        let alpha = -(-tau).exp_m1();
        trans.push(t_acc);
        w.push(t_acc * alpha);
        t_acc *= (-tau).exp();
    }
}

#[inline]
fn accumulate(ts: &[f64], w: &[f64], color: impl Fn(usize) -> [f64; 3]) -> Composite {
    let mut out = Composite::default();
    for (i, (&t, &wi)) in ts.iter().zip(w).enumerate() {
        if wi == 0.0 {
            continue;
        }
        let c = color(i);
        out.rgb[0] += wi * c[0];
        out.rgb[1] += wi * c[1];
        out.rgb[2] += wi * c[2];
        out.mask += wi;
        out.inv_depth += wi / t;
    }
    out
}

fn check_samples(ts: &[f64], colors: usize, sigmas: usize, far: f64) -> Result<()> {
    if colors != ts.len() || sigmas != ts.len() {
        return Err(shape(format!(
            "{} sample positions, {colors} colors, {sigmas} densities",
            ts.len()
        )));
    }
    if ts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(validation("sample positions must be strictly increasing"));
    }
    if let Some(&last) = ts.last() {
        if !(last <= far) {
            return Err(validation("last sample lies beyond t_far"));
        }
    }
    Ok(())
}

/// Quadrature `α_i = 1 − exp(−σ_i δ_i)`, `δ_i = t_{i+1} − t_i` (last uses
/// `far`), `rgb = Σ T_i α_i c_i`, `mask = Σ T_i α_i`, `inv_depth = Σ T_i α_i / t_i`.
pub fn composite(ts: &[f64], colors: &[[f64; 3]], sigmas: &[f64], far: f64) -> Result<Composite> {
    check_samples(ts, colors.len(), sigmas.len(), far)?;
    let (mut w, mut tr) = (Vec::new(), Vec::new());
    weights_into(ts, |i| sigmas[i], far, &mut w, &mut tr);
    Ok(accumulate(ts, &w, |i| colors[i]))
}

/// Gradient of the composite with respect to colors and densities, given
/// upstream gradients of `(rgb, mask, inv_depth)`.
pub fn composite_backward(
    ts: &[f64],
    colors: &[[f64; 3]],
    sigmas: &[f64],
    far: f64,
    d_out: &Composite,
) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    check_samples(ts, colors.len(), sigmas.len(), far)?;
    let (mut w, mut tr) = (Vec::new(), Vec::new());
    weights_into(ts, |i| sigmas[i], far, &mut w, &mut tr);
    let mut dc = vec![[0.0; 3]; ts.len()];
    let mut ds = vec![0.0; ts.len()];
    backward_into(
        ts,
        &w,
        &tr,
        |i| colors[i],
        |i| sigmas[i],
        far,
        d_out,
        |i, c, s| {
            dc[i] = c;
            ds[i] = s;
        },
    );
    Ok((dc, ds))
}

/// Shared adjoint: `dσ_i = δ_i [T_i (1 − α_i) a_i − Σ_{j>i} w_j a_j]` with
/// `a_j = ∂L/∂w_j`, and `dc_i = w_i ∂L/∂rgb`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_into(
    ts: &[f64],
    w: &[f64],
    trans: &[f64],
    color: impl Fn(usize) -> [f64; 3],
    sigma: impl Fn(usize) -> f64,
    far: f64,
    d: &Composite,
    mut emit: impl FnMut(usize, [f64; 3], f64),
) {
    let n = ts.len();
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let c = color(i);
        let a = d.rgb[0] * c[0] + d.rgb[1] * c[1] + d.rgb[2] * c[2] + d.mask + d.inv_depth / ts[i];
        let delta = if i + 1 < n {
            ts[i + 1] - ts[i]
        } else {
            far - ts[i]
        };
        let keep = (-sigma(i) * delta).exp();
        let ds = delta * (trans[i] * keep * a - suffix);
        suffix += w[i] * a;
        emit(i, [w[i] * d.rgb[0], w[i] * d.rgb[1], w[i] * d.rgb[2]], ds);
    }
}

/// `C = C_f + C_b (1 − M_f)` per pixel and channel.
pub fn composite_background(fg: &RenderOutput, bg: &Image) -> Result<Image> {
    fg.rgb.check_same_shape(bg, "background")?;
    let mut out = fg.rgb.clone();
    for i in 0..out.pixel_count() {
        let m = fg.mask.data[i];
        for c in 0..3 {
            out.data[3 * i + c] += bg.data[3 * i + c] * (1.0 - m);
        }
    }
    Ok(out)
}

/// Counter-based per-pixel generator.
pub fn pixel_rng(seed: u64, pixel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel);
    rng
}

/// Reusable per-ray scratch. Slots hold samples in generation order (coarse
/// then fine); `order` lists slots by increasing `t`.
#[derive(Clone, Debug, Default)]
pub struct TraceBuf {
    pub ts: Vec<f64>,
    pub samples: Vec<RadianceSample>,
    pub order: Vec<usize>,
    sorted_t: Vec<f64>,
    weights: Vec<f64>,
    trans: Vec<f64>,
    cdf: Vec<f64>,
    edges: Vec<f64>,
}

impl TraceBuf {
    /// Merged sample positions in increasing order (valid after a trace).
    pub fn sorted_ts(&self) -> &[f64] {
        &self.sorted_t
    }
}

/// Samples one ray and composites it, calling `eval(slot, x)` once per
/// sample. With `fixed` the given positions are used as-is (one slot each)
/// and no randomness is consumed.
pub fn trace_ray<R: Rng + ?Sized>(
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut R,
    fixed: Option<&[f64]>,
    buf: &mut TraceBuf,
    mut eval: impl FnMut(usize, &Vec3) -> RadianceSample,
) -> Composite {
    buf.ts.clear();
    buf.samples.clear();
    buf.order.clear();
    if let Some(ts) = fixed {
        for (i, &t) in ts.iter().enumerate() {
            buf.ts.push(t);
            buf.samples.push(eval(i, &ray.at(t)));
            buf.order.push(i);
        }
    } else {
        let nc = cfg.coarse;
        let span = ray.far - ray.near;
        let step = span / nc as f64;
        for i in 0..nc {
            let t = ray.near + (i as f64 + rng.random::<f64>()) * step;
            buf.ts.push(t);
            buf.samples.push(eval(i, &ray.at(t)));
        }
        if cfg.fine > 0 {
            weights_into(
                &buf.ts,
                |i| buf.samples[i].density,
                ray.far,
                &mut buf.weights,
                &mut buf.trans,
            );
            buf.edges.clear();
            buf.edges.push(ray.near);
            buf.edges.extend_from_slice(&buf.ts);
            buf.edges.push(ray.far);
            buf.cdf.clear();
            buf.cdf.push(0.0);
            let mut acc = 0.0;
            for b in 0..=nc {
                let len = buf.edges[b + 1] - buf.edges[b];
                let w = if b == 0 { 0.0 } else { buf.weights[b - 1] };
                acc += w + BIN_FLOOR * len / span;
                buf.cdf.push(acc);
            }
            let nf = cfg.fine;
            let mut bin = 0;
            for j in 0..nf {
                let u = (j as f64 + rng.random::<f64>()) / nf as f64 * acc;
                while bin + 1 < nc + 1 && buf.cdf[bin + 1] <= u {
                    bin += 1;
                }
                let (c0, c1) = (buf.cdf[bin], buf.cdf[bin + 1]);
                let frac = if c1 > c0 {
                    ((u - c0) / (c1 - c0)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let t = buf.edges[bin] + frac * (buf.edges[bin + 1] - buf.edges[bin]);
                let slot = nc + j;
                buf.ts.push(t);
                buf.samples.push(eval(slot, &ray.at(t)));
            }
        }
        // Merge the two sorted runs.
        let (mut a, mut b) = (0, nc);
        let n = buf.ts.len();
        while a < nc || b < n {
            if b >= n || (a < nc && buf.ts[a] <= buf.ts[b]) {
                buf.order.push(a);
                a += 1;
            } else {
                buf.order.push(b);
                b += 1;
            }
        }
    }
    buf.sorted_t.clear();
    buf.sorted_t.extend(buf.order.iter().map(|&s| buf.ts[s]));
    let order = &buf.order;
    let samples = &buf.samples;
    weights_into(
        &buf.sorted_t,
        |i| samples[order[i]].density,
        ray.far,
        &mut buf.weights,
        &mut buf.trans,
    );
    accumulate(&buf.sorted_t, &buf.weights, |i| samples[order[i]].color)
}

/// Back-propagates `d_out` from a traced ray into its samples, calling
/// `emit(slot, d_color, d_density)` for every sample.
pub fn trace_backward(
    ray: &Ray,
    buf: &TraceBuf,
    d_out: &Composite,
    mut emit: impl FnMut(usize, [f64; 3], f64),
) {
    let order = &buf.order;
    let samples = &buf.samples;
    backward_into(
        &buf.sorted_t,
        &buf.weights,
        &buf.trans,
        |i| samples[order[i]].color,
        |i| samples[order[i]].density,
        ray.far,
        d_out,
        |i, c, s| emit(order[i], c, s),
    );
}

/// Generic coarse-to-fine sampling against any point function; returns the
/// merged samples in increasing `t`.
pub fn sample_along_ray<R: Rng + ?Sized>(
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut R,
    mut field: impl FnMut(&Vec3) -> RadianceSample,
) -> Result<Vec<(f64, RadianceSample)>> {
    ray.validate()?;
    cfg.validate()?;
    let mut buf = TraceBuf::default();
    trace_ray(ray, cfg, rng, None, &mut buf, |_, x| field(x));
    Ok(buf
        .order
        .iter()
        .map(|&s| (buf.ts[s], buf.samples[s]))
        .collect())
}

/// Per-ray state for tracing through a prepared model.
pub struct RayWorkspace {
    pub buf: TraceBuf,
    pub caches: Vec<PointCache>,
}

impl RayWorkspace {
    pub fn new(field: &PreparedField<'_>, cfg: &RenderConfig) -> Self {
        Self::with_slots(field, cfg.samples_per_ray())
    }

    pub fn with_slots(field: &PreparedField<'_>, slots: usize) -> Self {
        Self {
            buf: TraceBuf::default(),
            caches: (0..slots).map(|_| PointCache::new(field.model())).collect(),
        }
    }

    fn ensure(&mut self, field: &PreparedField<'_>, slots: usize) {
        while self.caches.len() < slots {
            self.caches.push(PointCache::new(field.model()));
        }
    }
}

/// Whether the model-level cull applies for this field and config.
fn culls(field: &PreparedField<'_>, cfg: &RenderConfig) -> bool {
    cfg.cull && !field.model().variant().is_dense()
}

/// Traces one ray through a prepared model. Returns `None` in place of the
/// composite when the ray was culled (its output is exactly zero).
pub fn trace_model_ray(
    field: &PreparedField<'_>,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut ChaCha8Rng,
    fixed: Option<&[f64]>,
    ws: &mut RayWorkspace,
    stats: &mut RenderStats,
) -> Option<Composite> {
    stats.rays += 1;
    if culls(field, cfg) && !field.ray_hits(&ray.origin, &ray.direction, ray.near, ray.far) {
        stats.culled_rays += 1;
        return None;
    }
    let slots = fixed.map_or(cfg.samples_per_ray(), <[f64]>::len);
    ws.ensure(field, slots);
    let view = field.view_encoding(&ray.direction);
    let caches = &mut ws.caches;
    Some(trace_ray(ray, cfg, rng, fixed, &mut ws.buf, |slot, x| {
        field.eval_point(x, &view, &mut caches[slot], stats)
    }))
}

/// Accumulates the gradient of a traced ray into `grad` (length
/// `Model::grad_len`).
pub fn backward_model_ray(
    field: &PreparedField<'_>,
    ray: &Ray,
    ws: &RayWorkspace,
    d_out: &Composite,
    grad: &mut [f64],
) {
    trace_backward(ray, &ws.buf, d_out, |slot, dc, ds| {
        field.backward_point(&ws.caches[slot], dc, ds, grad);
    });
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub mask: Image,
    pub inv_depth: Image,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            rgb: Image::zeros(width, height, 3),
            mask: Image::zeros(width, height, 1),
            inv_depth: Image::zeros(width, height, 1),
            stats: RenderStats::default(),
        }
    }

    fn set(&mut self, i: usize, c: &Composite) {
        self.rgb.data[3 * i..3 * i + 3].copy_from_slice(&c.rgb);
        self.mask.data[i] = c.mask;
        self.inv_depth.data[i] = c.inv_depth;
    }
}

/// Renders one row of pixels.
fn render_row(
    field: &PreparedField<'_>,
    camera: &Camera,
    rays: &[Ray],
    row: usize,
    cfg: &RenderConfig,
    seed: u64,
) -> (Vec<Composite>, RenderStats) {
    let mut ws = RayWorkspace::new(field, cfg);
    let mut stats = RenderStats::default();
    let w = camera.width;
    let out = (0..w)
        .map(|col| {
            let i = row * w + col;
            let mut rng = pixel_rng(seed, i as u64);
            trace_model_ray(field, &rays[i], cfg, &mut rng, None, &mut ws, &mut stats)
                .unwrap_or_default()
        })
        .collect();
    (out, stats)
}

/// Renders a full image, parallel over rows.
pub fn render_image(
    camera: &Camera,
    field: &PreparedField<'_>,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderOutput> {
    camera.validate()?;
    cfg.validate()?;
    let rays = generate_rays(camera);
    let rows: Vec<(Vec<Composite>, RenderStats)> = (0..camera.height)
        .into_par_iter()
        .map(|row| render_row(field, camera, &rays, row, cfg, seed))
        .collect();
    let mut out = RenderOutput::zeros(camera.width, camera.height);
    for (row, (pixels, stats)) in rows.iter().enumerate() {
        for (col, c) in pixels.iter().enumerate() {
            out.set(row * camera.width + col, c);
        }
        out.stats.merge(stats);
    }
    Ok(out)
}

/// Renders the given pixels of a camera (row-major indices), returning the
/// composites and, for each, the merged sample positions used.
pub fn render_pixels(
    camera: &Camera,
    field: &PreparedField<'_>,
    pixels: &[usize],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(Vec<Composite>, Vec<Vec<f64>>, RenderStats)> {
    cfg.validate()?;
    let n = camera.width * camera.height;
    if let Some(&bad) = pixels.iter().find(|&&p| p >= n) {
        return Err(crate::Error::Index {
            what: "pixel",
            index: bad,
            len: n,
        });
    }
    let o = camera.center();
    let mut ws = RayWorkspace::new(field, cfg);
    let mut stats = RenderStats::default();
    let mut comps = Vec::with_capacity(pixels.len());
    let mut tlists = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let ray = Ray {
            origin: o,
            direction: camera.pixel_direction(p % camera.width, p / camera.width),
            near: camera.near,
            far: camera.far,
        };
        let mut rng = pixel_rng(seed, p as u64);
        match trace_model_ray(field, &ray, cfg, &mut rng, None, &mut ws, &mut stats) {
            Some(c) => {
                comps.push(c);
                tlists.push(ws.buf.sorted_ts().to_vec());
            }
            None => {
                comps.push(Composite::default());
                tlists.push(Vec::new());
            }
        }
    }
    Ok((comps, tlists, stats))
}

/// Re-renders pixels at frozen sample positions (as returned by
/// [`render_pixels`]); an empty list stands for a culled ray.
pub fn render_pixels_fixed(
    camera: &Camera,
    field: &PreparedField<'_>,
    pixels: &[usize],
    tlists: &[Vec<f64>],
) -> Result<Vec<Composite>> {
    if pixels.len() != tlists.len() {
        return Err(shape("one sample list per pixel is required"));
    }
    let cfg = RenderConfig {
        cull: false,
        ..Default::default()
    };
    let o = camera.center();
    let mut ws = RayWorkspace::with_slots(field, 0);
    let mut stats = RenderStats::default();
    let mut rng = pixel_rng(0, 0);
    Ok(pixels
        .iter()
        .zip(tlists)
        .map(|(&p, ts)| {
            if ts.is_empty() {
                return Composite::default();
            }
            let ray = Ray {
                origin: o,
                direction: camera.pixel_direction(p % camera.width, p / camera.width),
                near: camera.near,
                far: camera.far,
            };
            trace_model_ray(field, &ray, &cfg, &mut rng, Some(ts), &mut ws, &mut stats)
                .unwrap_or_default()
        })
        .collect())
}
