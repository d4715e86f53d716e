//! Cost comparison of model variants on one scene and camera.

use std::time::Instant;

use enarf::kinematics::{Camera, PoseConfig};
use enarf::model::{Model, ModelConfig, RenderStats, Variant};
use enarf::renderer::{render_image, RenderConfig, RenderOutput};
use enarf::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::cost::count_flops;
use crate::scene::SyntheticScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    /// Flops per rendered image.
    pub flops: f64,
    /// Parameter bytes plus peak bytes allocated while rendering.
    pub peak_bytes: u64,
    pub param_bytes: u64,
    /// Median wall-clock seconds per image.
    pub seconds: f64,
    /// Every timed repetition, in order.
    pub runs: Vec<f64>,
    pub threads: usize,
    pub stats: RenderStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            repetitions: 3,
            seed: 0,
        }
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Renders `pose` with a freshly initialized model of each variant: one
/// warmup, then `repetitions` timed renders that must reproduce the warmup
/// bit for bit.
pub fn benchmark_compare(
    variants: &[Variant],
    scene: &SyntheticScene,
    pose: &PoseConfig,
    camera: &Camera,
    cfg: &BenchConfig,
) -> Result<Vec<CostReport>> {
    if cfg.repetitions == 0 {
        return Err(Error::Validation(
            "benchmark needs at least one repetition".into(),
        ));
    }
    let canonical = scene.canonical()?;
    let mut reports = Vec::with_capacity(variants.len());
    for &variant in variants {
        let model = Model::new(
            ModelConfig {
                variant,
                ..cfg.model.clone()
            },
            canonical.clone(),
        )?;
        let params = model.init_params(cfg.seed);
        let render = |params: &[f64]| -> Result<RenderOutput> {
            let field = model.prepare(params, pose, 0.5)?;
            render_image(camera, &field, &cfg.render, cfg.seed)
        };
        alloc::reset_peak();
        let base = alloc::current_bytes();
        let warm = render(&params.values)?;
        let peak = alloc::peak_bytes().saturating_sub(base);
        let mut runs = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let t = Instant::now();
            let out = render(&params.values)?;
            runs.push(t.elapsed().as_secs_f64());
            if out != warm {
                return Err(Error::State(format!(
                    "{variant} render is not reproducible"
                )));
            }
        }
        let param_bytes = (params.len() * std::mem::size_of::<f64>()) as u64;
        reports.push(CostReport {
            variant,
            flops: count_flops(&model, &cfg.render, &warm.stats),
            peak_bytes: param_bytes + peak as u64,
            param_bytes,
            seconds: median(&runs),
            runs,
            threads: rayon::current_num_threads(),
            stats: warm.stats,
        });
    }
    Ok(reports)
}

/// Cost table as CSV, one row per variant.
pub fn reports_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(
        "variant,flops,peak_bytes,param_bytes,seconds,threads,rays,culled_rays,samples,decoded\n",
    );
    for r in reports {
        s.push_str(&format!(
            "{},{:.6e},{},{},{:.6},{},{},{},{},{}\n",
            r.variant,
            r.flops,
            r.peak_bytes,
            r.param_bytes,
            r.seconds,
            r.threads,
            r.stats.rays,
            r.stats.culled_rays,
            r.stats.samples,
            r.stats.decoded
        ));
    }
    s
}
