//! Radiance-field variants over one flat parameter vector.
//!
//! A [`Model`] fixes the variant, the canonical pose and the parameter
//! layout. [`Model::prepare`] binds parameters to a pose (and, for the
//! deformable variant, a time) and yields a [`PreparedField`] that evaluates
//! points and back-propagates through them.

use std::borrow::Cow;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    dense_acc, dense_backward, encode_into, he_uniform, init_decoder, init_selector, DecoderCache,
    DecoderRef, DecoderShape, PosEncConfig, RadianceSample, SelectorCache, SelectorRef,
    SelectorShape, SELECTOR_HIDDEN,
};
use crate::diffengine::{ParamLayout, ParamStore};
use crate::error::{shape, validation, Result};
use crate::kinematics::{CanonicalMap, CanonicalPose, PoseConfig, RigidTransform, Vec3};
use crate::triplane::{
    gather_add, inside_cube, logistic, plane_taps, scatter_add, taps_at, warp_features,
    warp_features_backward, Taps, TriPlaneRef, CUBE_HALF_WIDTH, FEATURE_CHANNELS,
};

/// Model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Tri-plane features with tri-plane selector.
    Enarf,
    /// [`Variant::Enarf`] plus time- and rotation-conditioned plane warping.
    DEnarf,
    /// Per-part encodings through a linear map, MLP selector, evaluated densely.
    BaselineNarf,
    /// Tri-plane features, uniform `1/K` selector inside the cube prior.
    NoSelector,
    /// Tri-plane features with the per-part MLP selector, evaluated densely.
    MlpSelector,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Enarf,
        Variant::DEnarf,
        Variant::BaselineNarf,
        Variant::NoSelector,
        Variant::MlpSelector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Enarf => "enarf",
            Variant::DEnarf => "d-enarf",
            Variant::BaselineNarf => "baseline-narf",
            Variant::NoSelector => "no-selector",
            Variant::MlpSelector => "mlp-selector",
        }
    }

    pub fn uses_triplane(self) -> bool {
        !matches!(self, Variant::BaselineNarf)
    }

    pub fn uses_prob_planes(self) -> bool {
        matches!(self, Variant::Enarf | Variant::DEnarf)
    }

    pub fn uses_mlp_selector(self) -> bool {
        matches!(self, Variant::BaselineNarf | Variant::MlpSelector)
    }

    /// Dense variants evaluate every part at every sample and skip no rays.
    pub fn is_dense(self) -> bool {
        self.uses_mlp_selector()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| validation(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Tri-plane resolution (texels per side).
    pub resolution: usize,
    /// Half-width of the canonical volume covered by the planes.
    pub extent: f64,
    pub cube_half_width: f64,
    pub normalize_length: bool,
    /// Append the encoded view direction to the decoder input.
    pub view_direction: bool,
    /// Encoding of local coordinates (selector MLPs) and view directions.
    pub encoding: PosEncConfig,
    pub time_encoding: PosEncConfig,
    /// Side of the low-resolution deformation grid.
    pub deform_grid: usize,
    pub deform_hidden: usize,
    /// Tri-plane features start uniform in `[-feature_init, feature_init]`.
    pub feature_init: f64,
    /// Initial value of every probability logit.
    pub prob_logit_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Enarf,
            resolution: 64,
            extent: 1.0,
            cube_half_width: CUBE_HALF_WIDTH,
            normalize_length: false,
            view_direction: false,
            encoding: PosEncConfig::default(),
            time_encoding: PosEncConfig::default(),
            deform_grid: 8,
            deform_hidden: 64,
            feature_init: 0.1,
            prob_logit_init: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(validation("tri-plane resolution must be at least 2"));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(validation("extent must be positive"));
        }
        if !(self.cube_half_width > 0.0) {
            return Err(validation("cube half-width must be positive"));
        }
        if self.deform_grid < 2 || self.deform_hidden == 0 {
            return Err(validation(
                "deformation grid must be at least 2 and hidden width nonzero",
            ));
        }
        if !(self.feature_init >= 0.0) || !self.prob_logit_init.is_finite() {
            return Err(validation(
                "initialization scales must be finite and nonnegative",
            ));
        }
        self.encoding.validate()?;
        self.time_encoding.validate()
    }
}

/// Counters gathered while rendering; the inputs of the FLOP model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub rays: u64,
    /// Rays skipped because they miss every part's bounding box.
    pub culled_rays: u64,
    /// Points handed to the field.
    pub samples: u64,
    pub cube_tests: u64,
    /// Point-part pairs that read the tri-planes.
    pub lookups: u64,
    /// Points run through the decoder.
    pub decoded: u64,
    /// Point-part positional encodings.
    pub encodings: u64,
    /// Point-part selector MLP evaluations.
    pub selector_evals: u64,
    /// Point-part linear maps in the baseline.
    pub linear_maps: u64,
}

impl RenderStats {
    pub fn merge(&mut self, o: &RenderStats) {
        self.rays += o.rays;
        self.culled_rays += o.culled_rays;
        self.samples += o.samples;
        self.cube_tests += o.cube_tests;
        self.lookups += o.lookups;
        self.decoded += o.decoded;
        self.encodings += o.encodings;
        self.selector_evals += o.selector_evals;
        self.linear_maps += o.linear_maps;
    }
}

/// Axis-aligned box in world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Whether the segment `o + t d`, `t ∈ [t0, t1]`, touches the box.
    pub fn hits(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> bool {
        let (mut lo, mut hi) = (t0, t1);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            lo = lo.max(ta);
            hi = hi.min(tb);
            if lo > hi {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Slots {
    features: Option<Range<usize>>,
    probs: Option<Range<usize>>,
    selector: Option<Range<usize>>,
    linear: Option<Range<usize>>,
    decoder: Range<usize>,
    deform: Option<Range<usize>>,
}

/// Shape of the deformation generator `[γ(t), R_1..R_K] → hidden → grid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformShape {
    pub input: usize,
    pub hidden: usize,
    pub grid: usize,
}

impl DeformShape {
    pub fn output(&self) -> usize {
        3 * self.grid * self.grid * 2
    }
}

/// Variant, canonical pose and parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    canonical: CanonicalPose,
    layout: ParamLayout,
    slots: Slots,
    upsample: Vec<Taps>,
}

impl Model {
    pub fn new(config: ModelConfig, canonical: CanonicalPose) -> Result<Self> {
        config.validate()?;
        let k = canonical.len();
        let r = config.resolution;
        let v = config.variant;
        let enc = config.encoding.dim();
        let mut layout = ParamLayout::new();
        let features = v
            .uses_triplane()
            .then(|| layout.push("triplane.features", &[3, r, r, FEATURE_CHANNELS], None));
        let probs = v
            .uses_prob_planes()
            .then(|| layout.push("triplane.probs", &[3, r, r, k], None));
        let selector = v.uses_mlp_selector().then(|| {
            let start = layout.total();
            for p in 0..k {
                layout.push(
                    format!("selector.{p}.w1"),
                    &[enc, SELECTOR_HIDDEN],
                    Some(enc),
                );
                layout.push(format!("selector.{p}.b1"), &[SELECTOR_HIDDEN], None);
                layout.push(
                    format!("selector.{p}.w2"),
                    &[SELECTOR_HIDDEN, 1],
                    Some(SELECTOR_HIDDEN),
                );
                layout.push(format!("selector.{p}.b2"), &[1], None);
            }
            start..layout.total()
        });
        let linear = matches!(v, Variant::BaselineNarf)
            .then(|| layout.push("baseline.linear", &[k * enc, FEATURE_CHANNELS], Some(enc)));
        let dshape = DecoderShape {
            feature_dim: FEATURE_CHANNELS,
            view: config.view_direction.then_some(config.encoding),
        };
        let start = layout.total();
        for (name, _, len, fan_in) in dshape.tensors() {
            let shape = match fan_in {
                Some(f) => vec![f, len / f],
                None => vec![len],
            };
            layout.push(format!("decoder.{name}"), &shape, fan_in);
        }
        let decoder = start..layout.total();
        let mut model = Self {
            config,
            canonical,
            layout,
            slots: Slots {
                features,
                probs,
                selector,
                linear,
                decoder,
                deform: None,
            },
            upsample: Vec::new(),
        };
        if v == Variant::DEnarf {
            let ds = model.deform_shape();
            let start = model.layout.total();
            model
                .layout
                .push("deform.w1", &[ds.input, ds.hidden], Some(ds.input));
            model.layout.push("deform.b1", &[ds.hidden], None);
            model
                .layout
                .push("deform.w2", &[ds.hidden, ds.output()], Some(ds.hidden));
            model.layout.push("deform.b2", &[ds.output()], None);
            model.slots.deform = Some(start..model.layout.total());
            let g = ds.grid;
            let s = (g - 1) as f64 / (r - 1) as f64;
            model.upsample = (0..r * r)
                .map(|t| taps_at((t % r) as f64 * s, (t / r) as f64 * s, g))
                .collect();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn parts(&self) -> usize {
        self.canonical.len()
    }

    pub fn canonical(&self) -> &CanonicalPose {
        &self.canonical
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn decoder_shape(&self) -> DecoderShape {
        DecoderShape {
            feature_dim: FEATURE_CHANNELS,
            view: self.config.view_direction.then_some(self.config.encoding),
        }
    }

    pub fn selector_shape(&self) -> SelectorShape {
        SelectorShape {
            parts: self.parts(),
            encoding: self.config.encoding,
        }
    }

    pub fn deform_shape(&self) -> DeformShape {
        DeformShape {
            input: self.config.time_encoding.dim_for(1) + 9 * self.parts(),
            hidden: self.config.deform_hidden,
            grid: self.config.deform_grid,
        }
    }

    fn features_len(&self) -> usize {
        self.slots.features.as_ref().map_or(0, |r| r.len())
    }

    /// Length of the gradient scratch used while rendering: the parameter
    /// gradient followed, for the deformable variant, by the gradient of the
    /// warped feature planes.
    pub fn grad_len(&self) -> usize {
        self.layout.total()
            + if self.variant() == Variant::DEnarf {
                self.features_len()
            } else {
                0
            }
    }

    /// Seeded initial parameters. Each parameter group draws from its own
    /// stream, so groups shared between variants start identical.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::zeros(self.layout.clone());
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        let vals = &mut store.values;
        if let Some(r) = &self.slots.features {
            let mut rng = stream(1);
            let s = self.config.feature_init;
            for v in &mut vals[r.clone()] {
                *v = if s > 0.0 {
                    rand::Rng::random_range(&mut rng, -s..s)
                } else {
                    0.0
                };
            }
        }
        if let Some(r) = &self.slots.probs {
            vals[r.clone()].fill(self.config.prob_logit_init);
        }
        if let Some(r) = &self.slots.selector {
            init_selector(&self.selector_shape(), &mut vals[r.clone()], &mut stream(2));
        }
        if let Some(r) = &self.slots.linear {
            he_uniform(
                &mut stream(3),
                self.config.encoding.dim(),
                &mut vals[r.clone()],
            );
        }
        init_decoder(
            &self.decoder_shape(),
            &mut vals[self.slots.decoder.clone()],
            &mut stream(4),
        );
        if let Some(r) = &self.slots.deform {
            let ds = self.deform_shape();
            let n1 = ds.input * ds.hidden;
            he_uniform(&mut stream(5), ds.input, &mut vals[r.start..r.start + n1]);
        }
        store
    }

    /// Binds parameters to a pose. `time` in `[0, 1]` conditions the
    /// deformable variant and is ignored otherwise.
    pub fn prepare<'a>(
        &'a self,
        params: &'a [f64],
        pose: &PoseConfig,
        time: f64,
    ) -> Result<PreparedField<'a>> {
        if params.len() != self.layout.total() {
            return Err(shape(format!(
                "model expects {} parameters, got {}",
                self.layout.total(),
                params.len()
            )));
        }
        if pose.len() != self.parts() {
            return Err(shape(format!(
                "model has {} parts, pose has {}",
                self.parts(),
                pose.len()
            )));
        }
        let a = self.config.cube_half_width;
        let mut maps = Vec::with_capacity(self.parts());
        let mut aabbs = Vec::with_capacity(self.parts());
        for (k, (part, cpart)) in pose.parts().iter().zip(self.canonical.parts()).enumerate() {
            let map = CanonicalMap::new(part, cpart, self.config.normalize_length);
            let inv = map
                .linear
                .try_inverse()
                .ok_or_else(|| validation("degenerate canonical map"))?;
            let c = self.canonical.center(k);
            let mut lo = Vec3::repeat(f64::INFINITY);
            let mut hi = Vec3::repeat(f64::NEG_INFINITY);
            for corner in 0..8 {
                let d = Vec3::new(
                    if corner & 1 == 0 { -a } else { a },
                    if corner & 2 == 0 { -a } else { a },
                    if corner & 4 == 0 { -a } else { a },
                );
                let w = inv * (c + d - map.offset);
                lo = lo.inf(&w);
                hi = hi.sup(&w);
            }
            let pad = Vec3::repeat(1e-9 * (1.0 + hi.abs().max().max(lo.abs().max())));
            aabbs.push(Aabb {
                min: lo - pad,
                max: hi + pad,
            });
            maps.push(map);
        }
        let mut field = PreparedField {
            model: self,
            params,
            maps,
            centers: (0..self.parts())
                .map(|k| self.canonical.center(k))
                .collect(),
            locals: pose.parts().iter().map(|p| p.transform.clone()).collect(),
            aabbs,
            features: Cow::Borrowed(
                self.slots
                    .features
                    .as_ref()
                    .map_or(&[][..], |r| &params[r.clone()]),
            ),
            deform: None,
        };
        if self.variant() == Variant::DEnarf {
            field.apply_deformation(pose, time);
        }
        Ok(field)
    }
}

#[derive(Clone, Debug)]
struct DeformState {
    input: Vec<f64>,
    hidden: Vec<f64>,
    field: Vec<f64>,
}

/// Bookkeeping for one part at one point.
#[derive(Clone, Copy, Debug, Default)]
pub struct ActivePart {
    pub part: usize,
    pub taps: [Taps; 3],
    pub sig: [f64; 3],
    pub prob: f64,
    pub inside: bool,
}

/// Everything the backward pass needs from one point evaluation.
#[derive(Clone, Debug)]
pub struct PointCache {
    pub active: Vec<ActivePart>,
    /// Per-part features, `FEATURE_CHANNELS` per entry of `active`.
    pub part_features: Vec<f64>,
    pub encodings: Vec<f64>,
    pub selectors: Vec<SelectorCache>,
    pub decoder: DecoderCache,
    /// False when the point lies outside every cube (zero output, zero gradient).
    pub live: bool,
}

impl PointCache {
    pub fn new(model: &Model) -> Self {
        let k = model.parts();
        Self {
            active: Vec::with_capacity(k),
            part_features: Vec::with_capacity(k * FEATURE_CHANNELS),
            encodings: vec![0.0; k * model.config.encoding.dim()],
            selectors: vec![SelectorCache::default(); k],
            decoder: DecoderCache::new(model.decoder_shape().input_dim()),
            live: false,
        }
    }
}

/// Parameters bound to one pose; evaluates and differentiates points.
#[derive(Clone, Debug)]
pub struct PreparedField<'a> {
    model: &'a Model,
    params: &'a [f64],
    maps: Vec<CanonicalMap>,
    centers: Vec<Vec3>,
    locals: Vec<RigidTransform>,
    aabbs: Vec<Aabb>,
    features: Cow<'a, [f64]>,
    deform: Option<DeformState>,
}

impl<'a> PreparedField<'a> {
    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn params(&self) -> &'a [f64] {
        self.params
    }

    pub fn aabbs(&self) -> &[Aabb] {
        &self.aabbs
    }

    /// The upsampled deformation offsets, `[3][R][R][2]`, when present.
    pub fn deformation(&self) -> Option<&[f64]> {
        self.deform.as_ref().map(|d| &d.field[..])
    }

    /// Feature planes as seen by lookups (warped for the deformable variant).
    pub fn feature_planes(&self) -> &[f64] {
        &self.features
    }

    /// Whether the segment can reach any part's cube.
    pub fn ray_hits(&self, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> bool {
        self.aabbs.iter().any(|b| b.hits(o, d, t0, t1))
    }

    /// Encoded view direction for the decoder, empty when disabled.
    pub fn view_encoding(&self, dir: &Vec3) -> Vec<f64> {
        let s = self.model.decoder_shape();
        match s.view {
            Some(cfg) => {
                let mut v = vec![0.0; cfg.dim()];
                encode_into(dir.as_slice(), &cfg, &mut v);
                v
            }
            None => Vec::new(),
        }
    }

    fn triplane(&self) -> TriPlaneRef<'_> {
        let c = &self.model.config;
        TriPlaneRef {
            resolution: c.resolution,
            extent: c.extent,
            parts: self.model.parts(),
            features: &self.features,
            probs: self
                .model
                .slots
                .probs
                .as_ref()
                .map_or(&[][..], |r| &self.params[r.clone()]),
        }
    }

    fn decoder(&self) -> DecoderRef<'a> {
        DecoderRef {
            shape: self.model.decoder_shape(),
            params: &self.params[self.model.slots.decoder.clone()],
        }
    }

    fn selector(&self) -> SelectorRef<'a> {
        let r = self.model.slots.selector.clone().unwrap_or(0..0);
        SelectorRef {
            shape: self.model.selector_shape(),
            params: &self.params[r],
        }
    }

    /// Evaluates the field at `x`, recording intermediates in `cache`.
    pub fn eval_point(
        &self,
        x: &Vec3,
        view_enc: &[f64],
        cache: &mut PointCache,
        stats: &mut RenderStats,
    ) -> RadianceSample {
        let m = self.model;
        let k_parts = m.parts();
        let a = m.config.cube_half_width;
        let res = m.config.resolution;
        let extent = m.config.extent;
        let variant = m.variant();
        cache.active.clear();
        cache.part_features.clear();
        cache.live = false;
        stats.samples += 1;
        stats.cube_tests += k_parts as u64;
        let f = &mut cache.decoder.input[..FEATURE_CHANNELS];
        f.fill(0.0);

        if !variant.is_dense() {
            for k in 0..k_parts {
                let xc = self.maps[k].apply(x);
                if inside_cube(&xc, &self.centers[k], a) {
                    cache.active.push(ActivePart {
                        part: k,
                        taps: plane_taps(&xc, extent, res),
                        inside: true,
                        ..Default::default()
                    });
                }
            }
            if cache.active.is_empty() {
                return RadianceSample::default();
            }
            let tri = self.triplane();
            let uniform = 1.0 / k_parts as f64;
            cache
                .part_features
                .resize(cache.active.len() * FEATURE_CHANNELS, 0.0);
            for (i, ap) in cache.active.iter_mut().enumerate() {
                ap.prob = if variant == Variant::NoSelector {
                    uniform
                } else {
                    let l = tri.prob_logits(&ap.taps, ap.part);
                    ap.sig = [logistic(l[0]), logistic(l[1]), logistic(l[2])];
                    ap.sig[0] * ap.sig[1] * ap.sig[2]
                };
                let fk = &mut cache.part_features[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS];
                tri.add_features(&ap.taps, 1.0, fk);
                for (o, v) in f.iter_mut().zip(fk.iter()) {
                    *o += ap.prob * v;
                }
            }
            stats.lookups += cache.active.len() as u64;
        } else {
            let enc_cfg = m.config.encoding;
            let n = enc_cfg.dim();
            let sel = self.selector();
            let tri = self.triplane();
            cache.part_features.resize(k_parts * FEATURE_CHANNELS, 0.0);
            let linear = m.slots.linear.as_ref().map(|r| &self.params[r.clone()]);
            for k in 0..k_parts {
                let xc = self.maps[k].apply(x);
                let inside = inside_cube(&xc, &self.centers[k], a);
                let xl = self.locals[k].to_local(x);
                let enc = &mut cache.encodings[k * n..(k + 1) * n];
                encode_into(xl.as_slice(), &enc_cfg, enc);
                let prob = sel.forward(k, enc, &mut cache.selectors[k]);
                let fk = &mut cache.part_features[k * FEATURE_CHANNELS..(k + 1) * FEATURE_CHANNELS];
                let mut taps = [Taps::default(); 3];
                match linear {
                    Some(w) => {
                        dense_acc(
                            &w[k * n * FEATURE_CHANNELS..(k + 1) * n * FEATURE_CHANNELS],
                            enc,
                            fk,
                        );
                    }
                    None if inside => {
                        taps = plane_taps(&xc, extent, res);
                        tri.add_features(&taps, 1.0, fk);
                        stats.lookups += 1;
                    }
                    None => {}
                }
                if inside {
                    for (o, v) in f.iter_mut().zip(fk.iter()) {
                        *o += prob * v;
                    }
                }
                cache.active.push(ActivePart {
                    part: k,
                    taps,
                    sig: [0.0; 3],
                    prob,
                    inside,
                });
            }
            stats.encodings += k_parts as u64;
            stats.selector_evals += k_parts as u64;
            if linear.is_some() {
                stats.linear_maps += k_parts as u64;
            }
        }

        cache.decoder.input[FEATURE_CHANNELS..].copy_from_slice(view_enc);
        let s = self.decoder().forward(&mut cache.decoder);
        stats.decoded += 1;
        if cache.active.iter().any(|ap| ap.inside) {
            cache.live = true;
            s
        } else {
            RadianceSample::default()
        }
    }

    /// Accumulates the gradient of a point evaluation into `grad`, which has
    /// length [`Model::grad_len`].
    pub fn backward_point(
        &self,
        cache: &PointCache,
        d_color: [f64; 3],
        d_sigma: f64,
        grad: &mut [f64],
    ) {
        if !cache.live {
            return;
        }
        let m = self.model;
        let variant = m.variant();
        let slots = &m.slots;
        let mut d_in = vec![0.0; cache.decoder.input.len()];
        self.decoder().backward(
            &cache.decoder,
            d_color,
            d_sigma,
            &mut grad[slots.decoder.clone()],
            Some(&mut d_in),
        );
        let df = &d_in[..FEATURE_CHANNELS];
        let res = m.config.resolution;
        let k_parts = m.parts();
        let plane_feat = res * res * FEATURE_CHANNELS;
        let total = m.layout.total();
        let feat_off = if variant == Variant::DEnarf {
            Some(total)
        } else {
            slots.features.as_ref().map(|r| r.start)
        };
        let n = m.config.encoding.dim();
        let mut scaled = [0.0; FEATURE_CHANNELS];

        for (i, ap) in cache.active.iter().enumerate() {
            if !ap.inside {
                continue;
            }
            let fk = &cache.part_features[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS];
            let dp: f64 = fk.iter().zip(df).map(|(a, b)| a * b).sum();
            if variant.uses_triplane() {
                let off = feat_off.unwrap_or(0);
                for p in 0..3 {
                    let base = off + p * plane_feat;
                    scatter_add(
                        &mut grad[base..base + plane_feat],
                        FEATURE_CHANNELS,
                        &ap.taps[p],
                        ap.prob,
                        df,
                    );
                }
            }
            match variant {
                Variant::Enarf | Variant::DEnarf => {
                    let off = slots.probs.as_ref().map_or(0, |r| r.start);
                    let plane_prob = res * res * k_parts;
                    for p in 0..3 {
                        let dl = dp * ap.prob * (1.0 - ap.sig[p]);
                        let t = &ap.taps[p];
                        for j in 0..4 {
                            grad[off + p * plane_prob + t.texel[j] * k_parts + ap.part] +=
                                t.weight[j] * dl;
                        }
                    }
                }
                Variant::NoSelector => {}
                Variant::MlpSelector | Variant::BaselineNarf => {
                    let k = ap.part;
                    let enc = &cache.encodings[k * n..(k + 1) * n];
                    let sel = slots.selector.clone().unwrap_or(0..0);
                    self.selector()
                        .backward(k, enc, &cache.selectors[k], dp, &mut grad[sel]);
                    if let Some(r) = &slots.linear {
                        for (s, d) in scaled.iter_mut().zip(df) {
                            *s = ap.prob * d;
                        }
                        let block = n * FEATURE_CHANNELS;
                        let w = &self.params[r.start + k * block..r.start + (k + 1) * block];
                        let g = &mut grad[r.start + k * block..r.start + (k + 1) * block];
                        dense_backward(w, enc, &scaled, g, None);
                    }
                }
            }
        }
    }

    fn apply_deformation(&mut self, pose: &PoseConfig, time: f64) {
        let m = self.model;
        let ds = m.deform_shape();
        let r = m.config.resolution;
        let range = m.slots.deform.clone().expect("deformable layout");
        let p = &self.params[range];
        let tn = m.config.time_encoding.dim_for(1);
        let mut input = vec![0.0; ds.input];
        encode_into(&[time], &m.config.time_encoding, &mut input[..tn]);
        for (k, part) in pose.parts().iter().enumerate() {
            let rot = part.transform.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    input[tn + 9 * k + 3 * i + j] = rot[(i, j)];
                }
            }
        }
        let (w1, rest) = p.split_at(ds.input * ds.hidden);
        let (b1, rest) = rest.split_at(ds.hidden);
        let (w2, b2) = rest.split_at(ds.hidden * ds.output());
        let mut hidden = b1.to_vec();
        dense_acc(w1, &input, &mut hidden);
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        let mut grid = b2.to_vec();
        dense_acc(w2, &hidden, &mut grid);
        let g2 = ds.grid * ds.grid;
        let mut field = vec![0.0; 3 * r * r * 2];
        for plane in 0..3 {
            let src = &grid[plane * g2 * 2..(plane + 1) * g2 * 2];
            for (t, taps) in m.upsample.iter().enumerate() {
                let o = (plane * r * r + t) * 2;
                gather_add(src, 2, taps, 1.0, &mut field[o..o + 2]);
            }
        }
        let src = &self.features;
        let mut warped = vec![0.0; src.len()];
        warp_features(src, &field, r, FEATURE_CHANNELS, &mut warped);
        self.features = Cow::Owned(warped);
        self.deform = Some(DeformState {
            input,
            hidden,
            field,
        });
    }

    /// Folds a render-time gradient scratch (length [`Model::grad_len`]) into
    /// a parameter gradient, propagating warped-plane gradients through the
    /// warp, the upsampling and the deformation generator.
    pub fn finish_gradient(&self, scratch: &[f64]) -> Vec<f64> {
        let m = self.model;
        let total = m.layout.total();
        let mut g = scratch[..total].to_vec();
        let Some(ds_state) = &self.deform else {
            return g;
        };
        let r = m.config.resolution;
        let feat = m.slots.features.clone().expect("tri-plane layout");
        let d_warped = &scratch[total..];
        let mut d_field = vec![0.0; ds_state.field.len()];
        warp_features_backward(
            &self.params[feat.clone()],
            &ds_state.field,
            r,
            FEATURE_CHANNELS,
            d_warped,
            &mut g[feat],
            &mut d_field,
        );
        let ds = m.deform_shape();
        let g2 = ds.grid * ds.grid;
        let mut d_grid = vec![0.0; ds.output()];
        for plane in 0..3 {
            let dst = &mut d_grid[plane * g2 * 2..(plane + 1) * g2 * 2];
            for (t, taps) in m.upsample.iter().enumerate() {
                let o = (plane * r * r + t) * 2;
                scatter_add(dst, 2, taps, 1.0, &d_field[o..o + 2]);
            }
        }
        let range = m.slots.deform.clone().expect("deformable layout");
        let p = &self.params[range.clone()];
        let gp = &mut g[range];
        let n1 = ds.input * ds.hidden;
        let n2 = ds.hidden * ds.output();
        let (gw1, rest) = gp.split_at_mut(n1);
        let (gb1, rest) = rest.split_at_mut(ds.hidden);
        let (gw2, gb2) = rest.split_at_mut(n2);
        for (a, b) in gb2.iter_mut().zip(&d_grid) {
            *a += b;
        }
        let mut dh = vec![0.0; ds.hidden];
        dense_backward(
            &p[n1 + ds.hidden..n1 + ds.hidden + n2],
            &ds_state.hidden,
            &d_grid,
            gw2,
            Some(&mut dh),
        );
        for (d, h) in dh.iter_mut().zip(&ds_state.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        for (a, b) in gb1.iter_mut().zip(&dh) {
            *a += b;
        }
        dense_backward(&p[..n1], &ds_state.input, &dh, gw1, None);
        g
    }
}
