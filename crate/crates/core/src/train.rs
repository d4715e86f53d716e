//! Dynamic-scene overfitting: supervised training of a model on posed
//! frames with ground-truth color and mask.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{
    adam_step, batch_gradient, check_finite, AdamConfig, AdamState, ParamStore, RayTask,
};
use crate::error::{validation, Error, Result};
use crate::image::Image;
use crate::kinematics::{Camera, PoseConfig};
use crate::model::{Model, RenderStats};
use crate::objectives::{dso_loss, dso_ray_grad, l2_with_grad, psnr, ssim, RayTarget};
use crate::renderer::{generate_rays, render_image, RenderConfig, RenderOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rays per iteration (capped at the frame's pixel count).
    pub batch: usize,
    pub iters: usize,
    pub lambda_l2: f64,
    /// Bone-loss weight; only used by adversarial objectives.
    pub lambda_bone: f64,
    /// R1 weight; only used by adversarial objectives.
    pub lambda_r1: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub render: RenderConfig,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4096,
            iters: 5000,
            lambda_l2: 1e-4,
            lambda_bone: 1.0,
            lambda_r1: 10.0,
            seed: 0,
            adam: AdamConfig::default(),
            render: RenderConfig::default(),
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(validation("batch size must be at least 1"));
        }
        for (name, w) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_bone", self.lambda_bone),
            ("lambda_r1", self.lambda_r1),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(validation(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        let a = &self.adam;
        if !(a.lr >= 0.0
            && a.decay > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(validation("invalid optimizer settings"));
        }
        self.render.validate()
    }
}

/// One posed view with its ground truth; `time` is normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    pub pose: PoseConfig,
    pub time: f64,
    pub rgb: Image,
    pub mask: Image,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        self.rgb
            .check_same_shape(&Image::zeros(w, h, 3), "frame rgb")?;
        self.mask
            .check_same_shape(&Image::zeros(w, h, 1), "frame mask")?;
        if self.mask.data.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(validation("frame mask must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(validation(format!(
                "frame time {} outside [0, 1]",
                self.time
            )));
        }
        Ok(())
    }

    fn target(&self, pixel: usize) -> RayTarget {
        RayTarget {
            rgb: [
                self.rgb.data[3 * pixel],
                self.rgb.data[3 * pixel + 1],
                self.rgb.data[3 * pixel + 2],
            ],
            mask: self.mask.data[pixel],
        }
    }
}

/// One line of the metric log. Evaluation columns are present only on
/// evaluation iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub loss: f64,
    pub dso: f64,
    pub l2: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<MetricRow>,
    /// Wall-clock seconds since training start, per row. Kept apart from
    /// the rows so the metric log itself is reproducible.
    pub seconds: Vec<f64>,
}

impl TrainLog {
    /// Deterministic metric CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,dso,l2,psnr,ssim\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{},{}",
                r.iter,
                r.loss,
                r.dso,
                r.l2,
                opt(r.psnr),
                opt(r.ssim)
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("iter,seconds\n");
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{},{t:.6}", r.iter);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Most recent evaluation as `(psnr, ssim)`.
    pub fn last_eval(&self) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .rev()
            .find_map(|r| Some((r.psnr?, r.ssim?)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub loss: f64,
    pub dso: f64,
    pub l2: f64,
    pub stats: RenderStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub renders: Vec<RenderOutput>,
}

/// Seed for the render of evaluation images.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Renders each frame with the given parameters and averages PSNR/SSIM of
/// the color images.
pub fn evaluate(
    model: &Model,
    params: &[f64],
    frames: &[Frame],
    render: &RenderConfig,
    seed: u64,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(validation("evaluation needs at least one frame"));
    }
    let mut renders = Vec::with_capacity(frames.len());
    let (mut p, mut s) = (0.0, 0.0);
    for f in frames {
        let field = model.prepare(params, &f.pose, f.time)?;
        let out = render_image(&f.camera, &field, render, seed ^ EVAL_SEED_SALT)?;
        p += psnr(&out.rgb, &f.rgb)?;
        s += ssim(&out.rgb, &f.rgb)?;
        renders.push(out);
    }
    let n = frames.len() as f64;
    Ok(EvalReport {
        psnr: p / n,
        ssim: s / n,
        renders,
    })
}

/// Stepwise trainer. Every iteration draws its randomness from a stream
/// keyed by the iteration index, so restoring parameters and optimizer
/// state resumes a run exactly.
pub struct Trainer<'a> {
    model: &'a Model,
    frames: &'a [Frame],
    heldout: &'a [Frame],
    config: TrainConfig,
    rays: Vec<Vec<RayTask>>,
    pub params: ParamStore,
    pub adam: AdamState,
    pub log: TrainLog,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        frames: &'a [Frame],
        heldout: &'a [Frame],
        config: TrainConfig,
    ) -> Result<Self> {
        let params = model.init_params(config.seed);
        let adam = AdamState::new(config.adam, params.len());
        Self::resume(model, frames, heldout, config, params, adam)
    }

    pub fn resume(
        model: &'a Model,
        frames: &'a [Frame],
        heldout: &'a [Frame],
        config: TrainConfig,
        params: ParamStore,
        adam: AdamState,
    ) -> Result<Self> {
        config.validate()?;
        if frames.is_empty() {
            return Err(validation("training needs at least one frame"));
        }
        for f in frames.iter().chain(heldout) {
            f.validate()?;
            if f.pose.len() != model.parts() {
                return Err(validation(format!(
                    "frame pose has {} parts, model has {}",
                    f.pose.len(),
                    model.parts()
                )));
            }
        }
        if params.layout != *model.layout()
            || adam.m.len() != params.len()
            || adam.v.len() != params.len()
        {
            return Err(validation(
                "parameters or optimizer state do not match the model layout",
            ));
        }
        let rays = frames
            .iter()
            .map(|f| {
                generate_rays(&f.camera)
                    .into_iter()
                    .enumerate()
                    .map(|(i, ray)| RayTask {
                        pixel: i as u64,
                        ray,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            frames,
            heldout,
            config,
            rays,
            params,
            adam,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.adam.step as usize
    }

    fn iter_rng(&self, iter: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter as u64);
        rng
    }

    /// One optimization step on a random ray batch of a random frame.
    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.iteration();
        let mut rng = self.iter_rng(iter);
        let fi = rng.random_range(0..self.frames.len());
        let frame = &self.frames[fi];
        let all = &self.rays[fi];
        let n = self.config.batch.min(all.len());
        let mut picked: Vec<usize> = sample(&mut rng, all.len(), n).into_vec();
        picked.sort_unstable();
        let tasks: Vec<RayTask> = picked.iter().map(|&i| all[i]).collect();
        let targets: Vec<RayTarget> = picked.iter().map(|&i| frame.target(i)).collect();
        let render_seed: u64 = rng.random();

        let field = self
            .model
            .prepare(&self.params.values, &frame.pose, frame.time)?;
        let scale = 2.0 / n as f64;
        let mut batch = batch_gradient(&field, &tasks, &self.config.render, render_seed, |i, c| {
            dso_ray_grad(c, &targets[i], scale)
        });
        drop(field);
        let dso = dso_loss(&batch.outputs, &targets)?;
        let l2 = match self.model.layout().range("triplane.features") {
            Ok(r) => l2_with_grad(
                &self.params.values[r.clone()],
                self.config.lambda_l2,
                &mut batch.grad.values[r],
            ),
            Err(_) => 0.0,
        };
        let loss = dso + self.config.lambda_l2 * l2;
        if !loss.is_finite() {
            let slice = match check_finite(
                &self.params.layout,
                &batch.grad.values[..self.params.len()],
                "gradient",
            ) {
                Err(Error::Numerical { slice, .. }) => slice,
                _ => "<loss>".to_string(),
            };
            return Err(Error::Numerical {
                slice,
                detail: format!("loss is {loss} at iteration {iter}"),
            });
        }
        adam_step(&mut self.params, &batch.grad, &mut self.adam).map_err(|e| match e {
            Error::Numerical { slice, detail } => Error::Numerical {
                slice,
                detail: format!("{detail} at iteration {iter}"),
            },
            other => other,
        })?;
        Ok(StepReport {
            iter,
            loss,
            dso,
            l2,
            stats: batch.stats,
        })
    }

    /// Held-out evaluation with the current parameters; falls back to the
    /// training frames when there is no held-out set.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let frames = if self.heldout.is_empty() {
            self.frames
        } else {
            self.heldout
        };
        evaluate(
            self.model,
            &self.params.values,
            frames,
            &self.config.render,
            self.config.seed,
        )
    }

    /// Runs until `config.iters` iterations are complete, logging every step.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration() < self.config.iters {
            let r = self.step()?;
            let done = self.iteration();
            let eval_now = done == self.config.iters
                || (self.config.eval_every > 0 && done.is_multiple_of(self.config.eval_every));
            let (psnr, ssim) = if eval_now {
                let e = self.evaluate()?;
                (Some(e.psnr), Some(e.ssim))
            } else {
                (None, None)
            };
            self.log.rows.push(MetricRow {
                iter: r.iter,
                loss: r.loss,
                dso: r.dso,
                l2: r.l2,
                psnr,
                ssim,
            });
            self.log.seconds.push(self.started.elapsed().as_secs_f64());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ParamStore,
    pub adam: AdamState,
    pub log: TrainLog,
}

/// Trains from a fresh initialization for `config.iters` iterations.
pub fn train_dso(
    model: &Model,
    frames: &[Frame],
    heldout: &[Frame],
    config: &TrainConfig,
) -> Result<TrainResult> {
    let mut t = Trainer::new(model, frames, heldout, config.clone())?;
    t.run()?;
    Ok(TrainResult {
        params: t.params,
        adam: t.adam,
        log: t.log,
    })
}
