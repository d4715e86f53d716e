//! Analytic FLOP accounting.
//!
//! Convention: one multiply-add is 2 flops, every transcendental (exp, sin,
//! cos, log) is 8 flops, and any other arithmetic or comparison is 1 flop.
//! Per-operation costs are derived from the layer sizes and multiplied by
//! the work counters recorded during an actual render, so culling is
//! accounted for exactly as it happened.

use enarf::decoder::{HIDDEN, OUTPUTS, SELECTOR_HIDDEN};
use enarf::model::{Model, ModelConfig, RenderStats, Variant};
use enarf::renderer::RenderConfig;
use enarf::triplane::FEATURE_CHANNELS;
use serde::{Deserialize, Serialize};

pub const MAC: f64 = 2.0;
pub const TRANSCENDENTAL: f64 = 8.0;

/// Flops of one unit of each counted operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCosts {
    /// Ray generation and the coarse-to-fine resampling, per traced ray.
    pub ray: f64,
    /// Ray-box test against every part, per ray (culling variants only).
    pub cull: f64,
    /// Compositing, per sample.
    pub composite: f64,
    /// Canonical transform plus box test, per point-part pair.
    pub cube_test: f64,
    /// Tri-plane feature read and blend, per point-part pair.
    pub lookup: f64,
    /// Positional encoding of one local coordinate.
    pub encoding: f64,
    /// Selector MLP, per point-part pair.
    pub selector: f64,
    /// Per-part linear map of the encoding, per point-part pair.
    pub linear_map: f64,
    /// Decoder, per decoded point.
    pub decoder: f64,
    /// Deformation generator, upsampling and feature warp, per image.
    pub deformation: f64,
}

/// `x_c = A x + b`.
const AFFINE: f64 = 9.0 * MAC + 3.0;

fn encoding_flops(dims: usize, frequencies: usize) -> f64 {
    (dims * frequencies) as f64 * (1.0 + 2.0 * TRANSCENDENTAL)
}

/// Decoder cost split into multiply-adds and everything else.
pub fn decoder_flops(input: usize) -> (f64, f64) {
    let macs = MAC * (input * HIDDEN + HIDDEN * OUTPUTS) as f64;
    let rest = (HIDDEN + OUTPUTS) as f64 + HIDDEN as f64 + OUTPUTS as f64 * TRANSCENDENTAL;
    (macs, rest)
}

pub fn op_costs(cfg: &ModelConfig, parts: usize, render: &RenderConfig) -> OpCosts {
    let variant = cfg.variant;
    let enc_dim = cfg.encoding.dim();
    let view_dim = if cfg.view_direction {
        cfg.encoding.dim()
    } else {
        0
    };
    let (dm, dr) = decoder_flops(FEATURE_CHANNELS + view_dim);
    let coarse = render.coarse as f64;
    let fine = render.fine as f64;
    // bilinear texel weights and indices for three planes
    let taps = 3.0 * (2.0 * 4.0 + 8.0);
    let features = 3.0 * 4.0 * FEATURE_CHANNELS as f64 * MAC + FEATURE_CHANNELS as f64 * MAC;
    let probs = if variant.uses_prob_planes() {
        3.0 * 4.0 * MAC + 3.0 * (TRANSCENDENTAL + 2.0) + 2.0
    } else {
        1.0
    };
    let selector = MAC * (enc_dim * SELECTOR_HIDDEN + 2 * SELECTOR_HIDDEN) as f64
        + SELECTOR_HIDDEN as f64
        + TRANSCENDENTAL
        + 2.0;
    let deformation = if variant == Variant::DEnarf {
        let r2 = (cfg.resolution * cfg.resolution) as f64;
        let g = cfg.deform_grid;
        let input = cfg.time_encoding.dim_for(1) + 9 * parts;
        let out = 3 * g * g * 2;
        encoding_flops(1, cfg.time_encoding.frequencies)
            + MAC * (input * cfg.deform_hidden + cfg.deform_hidden * out) as f64
            + (cfg.deform_hidden + out) as f64
            + 3.0 * r2 * (4.0 * 2.0 * MAC + 16.0)
            + 3.0 * r2 * (4.0 * FEATURE_CHANNELS as f64 * MAC + 16.0)
    } else {
        0.0
    };
    OpCosts {
        ray: 20.0 + 3.0 * coarse + fine * (8.0 + coarse.log2().ceil()) + (coarse + fine),
        cull: if render.cull && !variant.is_dense() {
            parts as f64 * 24.0
        } else {
            0.0
        },
        composite: TRANSCENDENTAL + 4.0 + 3.0 * MAC + 2.0 * MAC + 1.0,
        cube_test: AFFINE + 9.0,
        lookup: taps + features + probs,
        encoding: AFFINE + encoding_flops(3, cfg.encoding.frequencies),
        selector,
        linear_map: MAC * (enc_dim * FEATURE_CHANNELS) as f64 + FEATURE_CHANNELS as f64 * MAC,
        decoder: dm + dr,
        deformation,
    }
}

/// Total flops of one rendered image given its work counters.
pub fn count_flops(model: &Model, render: &RenderConfig, stats: &RenderStats) -> f64 {
    flops_from_counts(&op_costs(model.config(), model.parts(), render), stats)
}

pub fn flops_from_counts(c: &OpCosts, s: &RenderStats) -> f64 {
    let traced = (s.rays - s.culled_rays) as f64;
    c.ray * traced
        + c.cull * s.rays as f64
        + c.composite * s.samples as f64
        + c.cube_test * s.cube_tests as f64
        + c.lookup * s.lookups as f64
        + c.encoding * s.encodings as f64
        + c.selector * s.selector_evals as f64
        + c.linear_map * s.linear_maps as f64
        + c.decoder * s.decoded as f64
        + c.deformation
}

/// Per-ray and per-sample rates measured on one render, for extrapolating
/// counts to other image sizes and part counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkRates {
    /// Fraction of rays that survive culling.
    pub traced_fraction: f64,
    /// Tri-plane reads per sample.
    pub lookups_per_sample: f64,
    /// Fraction of samples that reach the decoder (culling variants).
    pub decoded_fraction: f64,
}

impl WorkRates {
    pub fn from_stats(s: &RenderStats) -> Self {
        let samples = s.samples.max(1) as f64;
        Self {
            traced_fraction: (s.rays - s.culled_rays) as f64 / s.rays.max(1) as f64,
            lookups_per_sample: s.lookups as f64 / samples,
            decoded_fraction: s.decoded as f64 / samples,
        }
    }
}

/// Expected work counters of one image of `pixels` rays.
pub fn expected_stats(
    variant: Variant,
    parts: usize,
    pixels: u64,
    render: &RenderConfig,
    rates: &WorkRates,
) -> RenderStats {
    let dense = variant.is_dense();
    let traced = if dense || !render.cull {
        pixels as f64
    } else {
        (pixels as f64 * rates.traced_fraction).round()
    };
    let samples = traced * render.samples_per_ray() as f64;
    let k = parts as f64;
    let per_part = |on: bool| if on { (samples * k) as u64 } else { 0 };
    RenderStats {
        rays: pixels,
        culled_rays: pixels - traced as u64,
        samples: samples as u64,
        cube_tests: (samples * k) as u64,
        lookups: (samples * rates.lookups_per_sample).round() as u64,
        decoded: if dense {
            samples as u64
        } else {
            (samples * rates.decoded_fraction).round() as u64
        },
        encodings: per_part(dense),
        selector_evals: per_part(dense),
        linear_maps: per_part(variant == Variant::BaselineNarf),
    }
}
