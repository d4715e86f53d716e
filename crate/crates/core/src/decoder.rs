//! Positional encoding, the color/density decoder, and the baseline feature
//! generator built from per-part encodings.
//!
//! All weight matrices are stored input-major (`w[i * out + o]`) in flat
//! slices so that parameters can live inside one contiguous buffer.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, validation, Error, Result};
use crate::kinematics::{to_local, PoseConfig, Vec3};
use crate::triplane::{logistic, FEATURE_CHANNELS};

pub const HIDDEN: usize = 64;
pub const OUTPUTS: usize = 4;
pub const SELECTOR_HIDDEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PosEncConfig {
    pub frequencies: usize,
    pub include_input: bool,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            frequencies: 10,
            include_input: true,
        }
    }
}

impl PosEncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies == 0 {
            return Err(validation(
                "positional encoding needs at least one frequency",
            ));
        }
        Ok(())
    }

    /// Encoded width for an input of `n` scalars.
    pub fn dim_for(&self, n: usize) -> usize {
        n * (2 * self.frequencies + usize::from(self.include_input))
    }

    /// Encoded width for a 3-vector.
    pub fn dim(&self) -> usize {
        self.dim_for(3)
    }
}

/// Writes `[x, sin(2^0 π x_0), cos(2^0 π x_0), sin(2^0 π x_1), ...]` into `out`.
#[inline]
pub fn encode_into(x: &[f64], cfg: &PosEncConfig, out: &mut [f64]) {
    let mut o = 0;
    if cfg.include_input {
        out[..x.len()].copy_from_slice(x);
        o = x.len();
    }
    let mut scale = PI;
    for _ in 0..cfg.frequencies {
        for &v in x {
            let (s, c) = (scale * v).sin_cos();
            out[o] = s;
            out[o + 1] = c;
            o += 2;
        }
        scale *= 2.0;
    }
}

pub fn positional_encode(x: &Vec3, cfg: &PosEncConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.dim()];
    encode_into(x.as_slice(), cfg, &mut out);
    out
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `y += xᵀ W` for an input-major `W` of shape `x.len() × y.len()`.
#[inline]
pub fn dense_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let out = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (yo, wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
}

/// Adjoint of [`dense_acc`]: `dW += x ⊗ dy` and, if requested, `dx += W dy`.
#[inline]
pub fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: Option<&mut [f64]>) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * out..(i + 1) * out];
        for (r, d) in row.iter_mut().zip(dy) {
            *r += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * out..(i + 1) * out];
            let mut acc = 0.0;
            for (wo, d) in row.iter().zip(dy) {
                acc += wo * d;
            }
            *dxi += acc;
        }
    }
}

/// Uniform He-style initialization, `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, out: &mut [f64]) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in out {
        *v = rng.random_range(-bound..bound);
    }
}

/// Output of the decoder at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub density: f64,
}

/// Intermediate values of one decoder evaluation.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    pub input: Vec<f64>,
    pub hidden: [f64; HIDDEN],
    pub raw: [f64; OUTPUTS],
    pub sample: RadianceSample,
}

impl DecoderCache {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input: vec![0.0; input_dim],
            hidden: [0.0; HIDDEN],
            raw: [0.0; OUTPUTS],
            sample: RadianceSample::default(),
        }
    }
}

/// Layout of the decoder parameter block `[w1 | b1 | w2 | b2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    pub feature_dim: usize,
    pub view: Option<PosEncConfig>,
}

impl DecoderShape {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.view.map_or(0, |v| v.dim())
    }

    pub fn param_count(&self) -> usize {
        self.input_dim() * HIDDEN + HIDDEN + HIDDEN * OUTPUTS + OUTPUTS
    }

    /// `(offset, len, fan_in)` of each tensor inside the block; fan-in is
    /// `None` for biases.
    pub fn tensors(&self) -> [(&'static str, usize, usize, Option<usize>); 4] {
        let n_in = self.input_dim();
        let w1 = n_in * HIDDEN;
        let w2 = HIDDEN * OUTPUTS;
        [
            ("w1", 0, w1, Some(n_in)),
            ("b1", w1, HIDDEN, None),
            ("w2", w1 + HIDDEN, w2, Some(HIDDEN)),
            ("b2", w1 + HIDDEN + w2, OUTPUTS, None),
        ]
    }
}

/// Borrowed decoder weights.
#[derive(Clone, Copy, Debug)]
pub struct DecoderRef<'a> {
    pub shape: DecoderShape,
    pub params: &'a [f64],
}

impl<'a> DecoderRef<'a> {
    pub fn new(shape: DecoderShape, params: &'a [f64]) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(shape_err(shape.param_count(), params.len()));
        }
        Ok(Self { shape, params })
    }

    fn split(&self) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let n1 = self.shape.input_dim() * HIDDEN;
        let (w1, rest) = self.params.split_at(n1);
        let (b1, rest) = rest.split_at(HIDDEN);
        let (w2, b2) = rest.split_at(HIDDEN * OUTPUTS);
        (w1, b1, w2, b2)
    }

    /// Evaluates the network on `cache.input`, filling the rest of the cache.
    #[inline]
    pub fn forward(&self, cache: &mut DecoderCache) -> RadianceSample {
        let (w1, b1, w2, b2) = self.split();
        cache.hidden.copy_from_slice(b1);
        dense_acc(w1, &cache.input, &mut cache.hidden);
        for h in &mut cache.hidden {
            *h = h.max(0.0);
        }
        cache.raw.copy_from_slice(b2);
        dense_acc(w2, &cache.hidden, &mut cache.raw);
        let s = RadianceSample {
            color: [
                logistic(cache.raw[0]),
                logistic(cache.raw[1]),
                logistic(cache.raw[2]),
            ],
            density: softplus(cache.raw[3]),
        };
        cache.sample = s;
        s
    }

    /// Accumulates parameter gradients into `grad` (same layout as the
    /// parameter block) and input gradients into `d_input` when given.
    #[inline]
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_color: [f64; 3],
        d_density: f64,
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let (w1, _, w2, _) = self.split();
        let c = cache.sample.color;
        let d_raw = [
            d_color[0] * c[0] * (1.0 - c[0]),
            d_color[1] * c[1] * (1.0 - c[1]),
            d_color[2] * c[2] * (1.0 - c[2]),
            d_density * logistic(cache.raw[3]),
        ];
        let n1 = self.shape.input_dim() * HIDDEN;
        let (gw1, rest) = grad.split_at_mut(n1);
        let (gb1, rest) = rest.split_at_mut(HIDDEN);
        let (gw2, gb2) = rest.split_at_mut(HIDDEN * OUTPUTS);
        for (g, d) in gb2.iter_mut().zip(&d_raw) {
            *g += d;
        }
        let mut d_hidden = [0.0; HIDDEN];
        dense_backward(w2, &cache.hidden, &d_raw, gw2, Some(&mut d_hidden));
        for (dh, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            if *h <= 0.0 {
                *dh = 0.0;
            }
        }
        for (g, d) in gb1.iter_mut().zip(&d_hidden) {
            *g += d;
        }
        dense_backward(w1, &cache.input, &d_hidden, gw1, d_input);
    }
}

fn shape_err(want: usize, got: usize) -> Error {
    shape(format!("expected {want} parameters, got {got}"))
}

/// Two fully-connected layers, `F_in → 64 → 4`, with a rectifier between.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    pub shape: DecoderShape,
    pub params: Vec<f64>,
}

impl MlpDecoder {
    pub fn zeros(shape: DecoderShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.param_count()],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn random(shape: DecoderShape, seed: u64) -> Self {
        let mut d = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        d.init(&mut rng);
        d
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        init_decoder(&self.shape, &mut self.params, rng);
    }

    pub fn as_ref(&self) -> DecoderRef<'_> {
        DecoderRef {
            shape: self.shape,
            params: &self.params,
        }
    }
}

pub fn init_decoder<R: Rng + ?Sized>(shape: &DecoderShape, params: &mut [f64], rng: &mut R) {
    for (_, off, len, fan_in) in shape.tensors() {
        match fan_in {
            Some(f) => he_uniform(rng, f, &mut params[off..off + len]),
            None => params[off..off + len].fill(0.0),
        }
    }
}

/// Decodes one feature vector, appending the encoded view direction when the
/// decoder was built with one.
pub fn decode(f: &[f64], dec: &MlpDecoder, view_dir: Option<&Vec3>) -> Result<RadianceSample> {
    let s = dec.shape;
    if f.len() != s.feature_dim {
        return Err(shape(format!(
            "decoder expects {} features, got {}",
            s.feature_dim,
            f.len()
        )));
    }
    let mut cache = DecoderCache::new(s.input_dim());
    cache.input[..f.len()].copy_from_slice(f);
    match (s.view, view_dir) {
        (Some(cfg), Some(d)) => encode_into(d.as_slice(), &cfg, &mut cache.input[f.len()..]),
        (None, None) => {}
        (Some(_), None) => return Err(shape("decoder expects a view direction")),
        (None, Some(_)) => return Err(shape("decoder was built without view input")),
    }
    Ok(dec.as_ref().forward(&mut cache))
}

/// Per-part selector networks, `γ(x) → 10 → 1`, stored back to back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectorShape {
    pub parts: usize,
    pub encoding: PosEncConfig,
}

impl SelectorShape {
    pub fn per_part(&self) -> usize {
        let n = self.encoding.dim();
        n * SELECTOR_HIDDEN + SELECTOR_HIDDEN + SELECTOR_HIDDEN + 1
    }

    pub fn param_count(&self) -> usize {
        self.parts * self.per_part()
    }

    /// Same convention as [`DecoderShape::tensors`], for one part block.
    pub fn tensors(&self) -> [(&'static str, usize, usize, Option<usize>); 4] {
        let n = self.encoding.dim();
        let w1 = n * SELECTOR_HIDDEN;
        [
            ("w1", 0, w1, Some(n)),
            ("b1", w1, SELECTOR_HIDDEN, None),
            (
                "w2",
                w1 + SELECTOR_HIDDEN,
                SELECTOR_HIDDEN,
                Some(SELECTOR_HIDDEN),
            ),
            ("b2", w1 + 2 * SELECTOR_HIDDEN, 1, None),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelectorCache {
    pub hidden: [f64; SELECTOR_HIDDEN],
    pub prob: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SelectorRef<'a> {
    pub shape: SelectorShape,
    pub params: &'a [f64],
}

impl<'a> SelectorRef<'a> {
    pub fn new(shape: SelectorShape, params: &'a [f64]) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(shape_err(shape.param_count(), params.len()));
        }
        Ok(Self { shape, params })
    }

    fn block(&self, k: usize) -> &'a [f64] {
        let n = self.shape.per_part();
        &self.params[k * n..(k + 1) * n]
    }

    /// Probability of part `k` given its encoded local coordinate.
    #[inline]
    pub fn forward(&self, k: usize, enc: &[f64], cache: &mut SelectorCache) -> f64 {
        let p = self.block(k);
        let n = enc.len();
        let (w1, rest) = p.split_at(n * SELECTOR_HIDDEN);
        let (b1, rest) = rest.split_at(SELECTOR_HIDDEN);
        let (w2, b2) = rest.split_at(SELECTOR_HIDDEN);
        cache.hidden.copy_from_slice(b1);
        dense_acc(w1, enc, &mut cache.hidden);
        let mut logit = b2[0];
        for (h, w) in cache.hidden.iter_mut().zip(w2) {
            *h = h.max(0.0);
            logit += *h * w;
        }
        cache.prob = logistic(logit);
        cache.prob
    }

    /// Accumulates the gradient of part `k`'s block into `grad`, which spans
    /// all parts.
    #[inline]
    pub fn backward(
        &self,
        k: usize,
        enc: &[f64],
        cache: &SelectorCache,
        d_prob: f64,
        grad: &mut [f64],
    ) {
        let p = self.block(k);
        let n = enc.len();
        let per = self.shape.per_part();
        let g = &mut grad[k * per..(k + 1) * per];
        let (gw1, rest) = g.split_at_mut(n * SELECTOR_HIDDEN);
        let (gb1, rest) = rest.split_at_mut(SELECTOR_HIDDEN);
        let (gw2, gb2) = rest.split_at_mut(SELECTOR_HIDDEN);
        let w2 =
            &p[n * SELECTOR_HIDDEN + SELECTOR_HIDDEN..n * SELECTOR_HIDDEN + 2 * SELECTOR_HIDDEN];
        let d_logit = d_prob * cache.prob * (1.0 - cache.prob);
        gb2[0] += d_logit;
        let mut dh = [0.0; SELECTOR_HIDDEN];
        for j in 0..SELECTOR_HIDDEN {
            gw2[j] += cache.hidden[j] * d_logit;
            if cache.hidden[j] > 0.0 {
                dh[j] = w2[j] * d_logit;
            }
        }
        for (g, d) in gb1.iter_mut().zip(&dh) {
            *g += d;
        }
        dense_backward(&p[..n * SELECTOR_HIDDEN], enc, &dh, gw1, None);
    }
}

pub fn init_selector<R: Rng + ?Sized>(shape: &SelectorShape, params: &mut [f64], rng: &mut R) {
    let per = shape.per_part();
    for k in 0..shape.parts {
        for (_, off, len, fan_in) in shape.tensors() {
            let s = &mut params[k * per + off..k * per + off + len];
            match fan_in {
                Some(f) => he_uniform(rng, f, s),
                None => s.fill(0.0),
            }
        }
    }
}

/// Which form of the baseline's linear feature map to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearForm {
    /// `W · Cat(p^k γ(x_k^l))` with one wide matrix.
    Concatenated,
    /// `Σ_k p^k W_k γ(x_k^l)` with per-part blocks.
    Decomposed,
}

/// Baseline generator: per-part local coordinates, positional encoding, an
/// MLP selector and a bias-free linear map to the 32-wide feature, followed by
/// the shared decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct NarfBaseline {
    pub parts: usize,
    pub encoding: PosEncConfig,
    /// `(K · enc) × 32`, input-major, so block `k` is rows `k·enc..(k+1)·enc`.
    pub linear: Vec<f64>,
    pub selector: Vec<f64>,
    pub decoder: MlpDecoder,
}

impl NarfBaseline {
    pub fn random(parts: usize, encoding: PosEncConfig, seed: u64) -> Result<Self> {
        encoding.validate()?;
        if parts == 0 {
            return Err(validation("baseline needs at least one part"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = encoding.dim();
        let mut linear = vec![0.0; parts * n * FEATURE_CHANNELS];
        he_uniform(&mut rng, n, &mut linear);
        let sel = SelectorShape { parts, encoding };
        let mut selector = vec![0.0; sel.param_count()];
        init_selector(&sel, &mut selector, &mut rng);
        let mut decoder = MlpDecoder::zeros(DecoderShape {
            feature_dim: FEATURE_CHANNELS,
            view: None,
        });
        decoder.init(&mut rng);
        Ok(Self {
            parts,
            encoding,
            linear,
            selector,
            decoder,
        })
    }

    pub fn selector_ref(&self) -> SelectorRef<'_> {
        SelectorRef {
            shape: SelectorShape {
                parts: self.parts,
                encoding: self.encoding,
            },
            params: &self.selector,
        }
    }

    /// Encoded local coordinates of every part, concatenated.
    pub fn encodings(&self, x: &Vec3, pose: &PoseConfig) -> Result<Vec<f64>> {
        if pose.len() != self.parts {
            return Err(shape(format!(
                "baseline has {} parts, pose {}",
                self.parts,
                pose.len()
            )));
        }
        let n = self.encoding.dim();
        let mut out = vec![0.0; self.parts * n];
        for (k, part) in pose.parts().iter().enumerate() {
            let xl = to_local(x, &part.transform);
            encode_into(xl.as_slice(), &self.encoding, &mut out[k * n..(k + 1) * n]);
        }
        Ok(out)
    }

    pub fn probabilities(&self, encodings: &[f64]) -> Vec<f64> {
        let n = self.encoding.dim();
        let sel = self.selector_ref();
        let mut cache = SelectorCache::default();
        (0..self.parts)
            .map(|k| sel.forward(k, &encodings[k * n..(k + 1) * n], &mut cache))
            .collect()
    }

    /// Linear feature map applied to given encodings and probabilities.
    pub fn linear_feature(&self, encodings: &[f64], probs: &[f64], form: LinearForm) -> Vec<f64> {
        let n = self.encoding.dim();
        let mut out = vec![0.0; FEATURE_CHANNELS];
        match form {
            LinearForm::Concatenated => {
                let masked: Vec<f64> = encodings
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e * probs[i / n])
                    .collect();
                dense_acc(&self.linear, &masked, &mut out);
            }
            LinearForm::Decomposed => {
                let block = n * FEATURE_CHANNELS;
                let mut part = [0.0; FEATURE_CHANNELS];
                for k in 0..self.parts {
                    part.fill(0.0);
                    dense_acc(
                        &self.linear[k * block..(k + 1) * block],
                        &encodings[k * n..(k + 1) * n],
                        &mut part,
                    );
                    for (o, v) in out.iter_mut().zip(&part) {
                        *o += probs[k] * v;
                    }
                }
            }
        }
        out
    }
}

/// Baseline 32-wide feature at a world point.
pub fn narf_baseline_feature(
    x: &Vec3,
    pose: &PoseConfig,
    baseline: &NarfBaseline,
    form: LinearForm,
) -> Result<Vec<f64>> {
    let enc = baseline.encodings(x, pose)?;
    let probs = baseline.probabilities(&enc);
    Ok(baseline.linear_feature(&enc, &probs, form))
}
