//! Flat parameter storage with named slices, gradient buffers, the Adam
//! optimizer with per-slice learning-rate equalization, and finite-difference
//! verification.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Error, Result};
use crate::image::Image;
use crate::kinematics::{Camera, PoseConfig};
use crate::model::{Model, PreparedField, RenderStats};
use crate::renderer::{
    backward_model_ray, generate_rays, pixel_rng, render_image, trace_model_ray, Composite, Ray,
    RayWorkspace, RenderConfig, RenderOutput,
};

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Input width for weight matrices; `None` for biases and planes.
    pub fan_in: Option<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Equalized learning-rate multiplier.
    pub fn lr_scale(&self) -> f64 {
        self.fan_in.map_or(1.0, |f| 1.0 / (f as f64).sqrt())
    }
}

/// Ordered, disjoint, gap-free slices over `0..total`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    slices: Vec<ParamSlice>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its range.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: Option<usize>,
    ) -> Range<usize> {
        let s = ParamSlice {
            name: name.into(),
            offset: self.total,
            shape: shape.to_vec(),
            fan_in,
        };
        self.total += s.len();
        let r = s.range();
        self.slices.push(s);
        r
    }

    pub fn from_slices(slices: Vec<ParamSlice>) -> Result<Self> {
        let mut total = 0;
        for s in &slices {
            if s.offset != total {
                return Err(Error::Format(format!(
                    "slice `{}` starts at {} but previous slices end at {total}",
                    s.name, s.offset
                )));
            }
            total += s.len();
        }
        Ok(Self { slices, total })
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        self.get(name)
            .map(ParamSlice::range)
            .ok_or_else(|| validation(format!("no parameter slice named `{name}`")))
    }

    /// Range spanning every slice whose name starts with `prefix`; those
    /// slices must be contiguous.
    pub fn prefix_range(&self, prefix: &str) -> Option<Range<usize>> {
        let hits: Vec<&ParamSlice> = self
            .slices
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .collect();
        let first = hits.first()?;
        let last = hits.last()?;
        Some(first.offset..last.offset + last.len())
    }

    /// Name of the slice containing flat index `i`.
    pub fn slice_of(&self, i: usize) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.range().contains(&i))
    }
}

/// Parameters: one flat vector plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(shape(format!(
                "layout declares {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.layout.range(name)?;
        Ok(&mut self.values[r])
    }

    /// Fails with a diagnostic naming the first slice holding a non-finite value.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.layout, &self.values, what)
    }
}

pub(crate) fn check_finite(layout: &ParamLayout, values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let slice = layout
            .slice_of(i)
            .map_or("<unknown>".to_string(), |s| s.name.clone());
        return Err(Error::Numerical {
            slice,
            detail: format!("{what} at flat index {i} is {}", values[i]),
        });
    }
    Ok(())
}

/// Gradient buffer sharing a [`ParamStore`]'s layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub values: Vec<f64>,
}

impl GradStore {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn zero(&mut self) {
        self.values.fill(0.0);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(shape("gradient buffers differ in length"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply `1/√fan_in` to weight-matrix updates.
    pub equalize: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.99995,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            equalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Base learning rate after decay at the current step, before equalization.
    pub fn effective_lr(&self) -> f64 {
        self.config.lr * self.config.decay.powf(self.step as f64)
    }
}

/// One Adam update with bias correction. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(params: &mut ParamStore, grads: &GradStore, state: &mut AdamState) -> Result<()> {
    let n = params.values.len();
    if grads.values.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(shape(format!(
            "adam: {n} parameters, {} gradients, {} moments",
            grads.values.len(),
            state.m.len()
        )));
    }
    check_finite(&params.layout, &grads.values, "gradient")?;
    let c = state.config;
    let lr = state.effective_lr();
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for s in params.layout.slices() {
        let step = lr * if c.equalize { s.lr_scale() } else { 1.0 };
        for i in s.range() {
            let g = grads.values[i];
            let m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            params.values[i] -= step * (m / bc1) / ((v / bc2).sqrt() + c.eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences at the given coordinates.
pub fn finite_diff_check_at<F: FnMut(&[f64]) -> f64>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<FdReport> {
    if analytic.len() != params.len() {
        return Err(shape(
            "analytic gradient length differs from parameter length",
        ));
    }
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::Index {
                what: "parameter",
                index: i,
                len: params.len(),
            });
        }
        work[i] = params[i] + step;
        let up = loss(&work);
        work[i] = params[i] - step;
        let down = loss(&work);
        work[i] = params[i];
        let fd = (up - down) / (2.0 * step);
        let e = relative_error(analytic[i], fd);
        if !(e <= report.max_rel_err) {
            report.max_rel_err = e;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Central differences on `n_coords` coordinates drawn without replacement.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    n_coords: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    let coords = random_coords(params.len(), n_coords, seed);
    finite_diff_check_at(loss, params, analytic, &coords, step)
}

pub fn random_coords(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, len, n.min(len)).into_vec();
    v.sort_unstable();
    v
}

/// Ray batches are split into this many contiguous chunks whose gradients
/// are summed in chunk order, whatever the thread count.
pub const GRAD_CHUNKS: usize = 8;

/// One ray of a batch; `pixel` selects its sampling stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayTask {
    pub pixel: u64,
    pub ray: Ray,
}

#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Gradient with respect to the full parameter vector.
    pub grad: GradStore,
    /// Forward composites, zero for culled rays.
    pub outputs: Vec<Composite>,
    pub stats: RenderStats,
}

/// Renders every task and back-propagates the per-ray output gradient
/// returned by `loss_grad(task_index, composite)`.
pub fn batch_gradient<F>(
    field: &PreparedField<'_>,
    tasks: &[RayTask],
    cfg: &RenderConfig,
    seed: u64,
    loss_grad: F,
) -> BatchGradient
where
    F: Fn(usize, &Composite) -> Composite + Sync,
{
    let n = tasks.len();
    let glen = field.model().grad_len();
    let parts: Vec<(Vec<f64>, Vec<Composite>, RenderStats)> = (0..GRAD_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let range = c * n / GRAD_CHUNKS..(c + 1) * n / GRAD_CHUNKS;
            let mut scratch = vec![0.0; if range.is_empty() { 0 } else { glen }];
            let mut ws = RayWorkspace::new(field, cfg);
            let mut stats = RenderStats::default();
            let mut outs = Vec::with_capacity(range.len());
            for i in range {
                let t = &tasks[i];
                let mut rng = pixel_rng(seed, t.pixel);
                match trace_model_ray(field, &t.ray, cfg, &mut rng, None, &mut ws, &mut stats) {
                    Some(comp) => {
                        let d = loss_grad(i, &comp);
                        backward_model_ray(field, &t.ray, &ws, &d, &mut scratch);
                        outs.push(comp);
                    }
                    None => outs.push(Composite::default()),
                }
            }
            (scratch, outs, stats)
        })
        .collect();
    let mut total = vec![0.0; glen];
    let mut outputs = Vec::with_capacity(n);
    let mut stats = RenderStats::default();
    for (g, o, s) in parts {
        for (a, b) in total.iter_mut().zip(&g) {
            *a += b;
        }
        outputs.extend(o);
        stats.merge(&s);
    }
    BatchGradient {
        grad: GradStore {
            values: field.finish_gradient(&total),
        },
        outputs,
        stats,
    }
}

/// Rays of every pixel of `camera`, tagged with their pixel index.
pub fn camera_tasks(camera: &Camera) -> Vec<RayTask> {
    generate_rays(camera)
        .into_iter()
        .enumerate()
        .map(|(i, ray)| RayTask {
            pixel: i as u64,
            ray,
        })
        .collect()
}

/// Full-image render with a separate backward pass, for losses that need
/// the whole image before any gradient is known.
///
/// The backward pass re-traces every ray with the recorded parameters and
/// seed, which reproduces the forward pass exactly, instead of keeping all
/// per-sample intermediates alive in between.
pub struct RenderSession<'m> {
    model: &'m Model,
    camera: Camera,
    pose: PoseConfig,
    time: f64,
    cfg: RenderConfig,
    seed: u64,
    recorded: Option<(Vec<f64>, RenderOutput)>,
}

impl<'m> RenderSession<'m> {
    pub fn new(
        model: &'m Model,
        camera: Camera,
        pose: PoseConfig,
        time: f64,
        cfg: RenderConfig,
        seed: u64,
    ) -> Self {
        Self {
            model,
            camera,
            pose,
            time,
            cfg,
            seed,
            recorded: None,
        }
    }

    pub fn forward(&mut self, params: &[f64]) -> Result<&RenderOutput> {
        let field = self.model.prepare(params, &self.pose, self.time)?;
        let out = render_image(&self.camera, &field, &self.cfg, self.seed)?;
        self.recorded = Some((params.to_vec(), out));
        Ok(&self.recorded.as_ref().expect("just recorded").1)
    }

    pub fn output(&self) -> Option<&RenderOutput> {
        self.recorded.as_ref().map(|r| &r.1)
    }

    /// Parameter gradient given image-space gradients of the loss with
    /// respect to the recorded rgb, mask and (optionally) inverse depth.
    pub fn backward(
        &self,
        d_rgb: &Image,
        d_mask: &Image,
        d_inv_depth: Option<&Image>,
    ) -> Result<GradStore> {
        let (params, out) = self
            .recorded
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        out.rgb.check_same_shape(d_rgb, "rgb gradient")?;
        out.mask.check_same_shape(d_mask, "mask gradient")?;
        if let Some(d) = d_inv_depth {
            out.inv_depth
                .check_same_shape(d, "inverse-depth gradient")?;
        }
        let field = self.model.prepare(params, &self.pose, self.time)?;
        let tasks = camera_tasks(&self.camera);
        let r = batch_gradient(&field, &tasks, &self.cfg, self.seed, |i, _| Composite {
            rgb: [
                d_rgb.data[3 * i],
                d_rgb.data[3 * i + 1],
                d_rgb.data[3 * i + 2],
            ],
            mask: d_mask.data[i],
            inv_depth: d_inv_depth.map_or(0.0, |d| d.data[i]),
        });
        Ok(r.grad)
    }
}
