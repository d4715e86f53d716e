//! Tri-plane storage in canonical space.
//!
//! Planes are stored channel-last, `[plane][row][col][channel]`, for the three
//! axis-aligned projections xy, xz and yz (in that order). A canonical point
//! `x_c` is looked up at `(x, y)`, `(x, z)` and `(y, z)` divided by the
//! extent, so the planes cover the cube `[-extent, extent]³`. Grid nodes sit
//! at `u = -1 + 2 i / (R - 1)`; lookups outside `[-1, 1]` clamp to the border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, validation, Error, Result};
use crate::kinematics::{CanonicalMap, CanonicalPose, PoseConfig, Vec3};

/// Width of the tri-plane feature vector.
pub const FEATURE_CHANNELS: usize = 32;

/// Half-width (meters) of the per-part cube outside which a part's
/// probability is forced to zero.
pub const CUBE_HALF_WIDTH: f64 = 1.0 / 3.0;

/// Bilinear footprint of one lookup: four texel indices (`row * R + col`)
/// and their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Taps {
    pub texel: [usize; 4],
    pub weight: [f64; 4],
}

/// Continuous texel coordinate of a normalized plane coordinate.
#[inline]
pub fn texel_coord(u: f64, res: usize) -> f64 {
    (u + 1.0) * (res - 1) as f64 / 2.0
}

/// Bilinear taps at continuous texel coordinates, clamped to the grid.
#[inline]
pub fn taps_at(gx: f64, gy: f64, res: usize) -> Taps {
    let max = (res - 1) as f64;
    let gx = gx.clamp(0.0, max);
    let gy = gy.clamp(0.0, max);
    let x0 = (gx as usize).min(res - 2);
    let y0 = (gy as usize).min(res - 2);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let base = y0 * res + x0;
    Taps {
        texel: [base, base + 1, base + res, base + res + 1],
        weight: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

#[inline]
pub fn taps_uv(u: f64, v: f64, res: usize) -> Taps {
    taps_at(texel_coord(u, res), texel_coord(v, res), res)
}

/// `out += scale * bilinear(data)` over all channels.
#[inline]
pub fn gather_add(data: &[f64], channels: usize, taps: &Taps, scale: f64, out: &mut [f64]) {
    let rows: [&[f64]; 4] =
        std::array::from_fn(|i| &data[taps.texel[i] * channels..(taps.texel[i] + 1) * channels]);
    let w: [f64; 4] = std::array::from_fn(|i| taps.weight[i] * scale);
    for c in 0..channels {
        out[c] += w[0] * rows[0][c] + w[1] * rows[1][c] + w[2] * rows[2][c] + w[3] * rows[3][c];
    }
}

/// Adjoint of [`gather_add`]: `grad[taps] += scale * w * d_out`.
#[inline]
pub fn scatter_add(grad: &mut [f64], channels: usize, taps: &Taps, scale: f64, d_out: &[f64]) {
    for i in 0..4 {
        let w = taps.weight[i] * scale;
        if w == 0.0 {
            continue;
        }
        let row = &mut grad[taps.texel[i] * channels..(taps.texel[i] + 1) * channels];
        for c in 0..channels {
            row[c] += w * d_out[c];
        }
    }
}

/// Single channel `k` of a `channels`-wide plane.
#[inline]
pub fn gather_channel(data: &[f64], channels: usize, k: usize, taps: &Taps) -> f64 {
    (0..4)
        .map(|i| taps.weight[i] * data[taps.texel[i] * channels + k])
        .sum()
}

/// Normalized `(u, v)` on the xy, xz and yz planes.
#[inline]
pub fn plane_coords(xc: &Vec3, extent: f64) -> [[f64; 2]; 3] {
    let p = xc / extent;
    [[p.x, p.y], [p.x, p.z], [p.y, p.z]]
}

#[inline]
pub fn plane_taps(xc: &Vec3, extent: f64, res: usize) -> [Taps; 3] {
    let uv = plane_coords(xc, extent);
    std::array::from_fn(|p| taps_uv(uv[p][0], uv[p][1], res))
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A single multi-channel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != resolution * resolution * channels {
            return Err(shape(format!(
                "plane {resolution}x{resolution}x{channels} got {} values",
                data.len()
            )));
        }
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    pub fn at(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.resolution + col) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Bilinear lookup with border clamping; exact at grid nodes.
pub fn sample_plane(plane: &Plane, uv: [f64; 2]) -> Result<Vec<f64>> {
    if plane.resolution < 2 {
        return Err(validation("plane resolution must be at least 2"));
    }
    let taps = taps_uv(uv[0], uv[1], plane.resolution);
    let mut out = vec![0.0; plane.channels];
    gather_add(&plane.data, plane.channels, &taps, 1.0, &mut out);
    Ok(out)
}

/// Shared options for canonical-space lookups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOptions {
    pub normalize_length: bool,
    pub cube_half_width: f64,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            normalize_length: false,
            cube_half_width: CUBE_HALF_WIDTH,
        }
    }
}

/// Whether a canonical point lies inside the cube prior of a part.
#[inline]
pub fn inside_cube(xc: &Vec3, center: &Vec3, half_width: f64) -> bool {
    let d = xc - center;
    d.x.abs() <= half_width && d.y.abs() <= half_width && d.z.abs() <= half_width
}

/// Borrowed tri-plane data; the form the renderer works on.
#[derive(Clone, Copy, Debug)]
pub struct TriPlaneRef<'a> {
    pub resolution: usize,
    pub extent: f64,
    pub parts: usize,
    pub features: &'a [f64],
    pub probs: &'a [f64],
}

impl TriPlaneRef<'_> {
    #[inline]
    pub fn feature_plane_len(&self) -> usize {
        self.resolution * self.resolution * FEATURE_CHANNELS
    }

    #[inline]
    pub fn prob_plane_len(&self) -> usize {
        self.resolution * self.resolution * self.parts
    }

    /// `out += scale * (F_xy + F_xz + F_yz)` at the given taps.
    #[inline]
    pub fn add_features(&self, taps: &[Taps; 3], scale: f64, out: &mut [f64]) {
        let n = self.feature_plane_len();
        for (p, t) in taps.iter().enumerate() {
            gather_add(
                &self.features[p * n..(p + 1) * n],
                FEATURE_CHANNELS,
                t,
                scale,
                out,
            );
        }
    }

    /// Per-plane probability logits of part `k`.
    #[inline]
    pub fn prob_logits(&self, taps: &[Taps; 3], k: usize) -> [f64; 3] {
        let n = self.prob_plane_len();
        std::array::from_fn(|p| {
            gather_channel(&self.probs[p * n..(p + 1) * n], self.parts, k, &taps[p])
        })
    }
}

/// Explicit tri-plane: 32 shared feature channels plus one probability
/// channel per part on each of the three planes, `(32 + K) × 3` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneField {
    pub resolution: usize,
    pub extent: f64,
    pub parts: usize,
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TriPlaneField {
    pub fn zeros(resolution: usize, extent: f64, parts: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(validation("tri-plane resolution must be at least 2"));
        }
        if parts == 0 {
            return Err(validation("tri-plane needs at least one part"));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(validation(format!(
                "tri-plane extent must be > 0, got {extent}"
            )));
        }
        Ok(Self {
            resolution,
            extent,
            parts,
            features: vec![0.0; 3 * resolution * resolution * FEATURE_CHANNELS],
            probs: vec![0.0; 3 * resolution * resolution * parts],
        })
    }

    /// Uniform random features and logits in `[-scale, scale]`.
    pub fn random(
        resolution: usize,
        extent: f64,
        parts: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut f = Self::zeros(resolution, extent, parts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in f.features.iter_mut().chain(f.probs.iter_mut()) {
            *v = rng.random_range(-scale..scale);
        }
        Ok(f)
    }

    pub fn channels_per_plane(&self) -> usize {
        FEATURE_CHANNELS + self.parts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.resolution * self.resolution;
        if self.features.len() != 3 * n * FEATURE_CHANNELS || self.probs.len() != 3 * n * self.parts
        {
            return Err(shape(
                "tri-plane buffers do not match resolution and part count",
            ));
        }
        if !self
            .features
            .iter()
            .chain(&self.probs)
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical {
                slice: "triplane".into(),
                detail: "non-finite plane value".into(),
            });
        }
        Ok(())
    }

    pub fn as_ref(&self) -> TriPlaneRef<'_> {
        TriPlaneRef {
            resolution: self.resolution,
            extent: self.extent,
            parts: self.parts,
            features: &self.features,
            probs: &self.probs,
        }
    }

    /// Feature plane `p` (0 = xy, 1 = xz, 2 = yz) as a standalone grid.
    pub fn feature_plane(&self, p: usize) -> Plane {
        let n = self.resolution * self.resolution * FEATURE_CHANNELS;
        Plane {
            resolution: self.resolution,
            channels: FEATURE_CHANNELS,
            data: self.features[p * n..(p + 1) * n].to_vec(),
        }
    }
}

/// Part probability: product of the logistic of the three plane logits.
pub fn selector_prob(field: &TriPlaneField, x_c: &Vec3, part_index: usize) -> Result<f64> {
    if part_index >= field.parts {
        return Err(Error::Index {
            what: "part",
            index: part_index,
            len: field.parts,
        });
    }
    let r = field.as_ref();
    let taps = plane_taps(x_c, r.extent, r.resolution);
    Ok(r.prob_logits(&taps, part_index)
        .iter()
        .map(|&l| logistic(l))
        .product())
}

/// Blended feature `Σ_k p^k (F_xy + F_xz + F_yz)(x_k^c)`. Parts whose cube
/// prior rejects the point are skipped before any plane lookup.
pub fn feature_at(
    field: &TriPlaneField,
    x: &Vec3,
    pose: &PoseConfig,
    canon: &CanonicalPose,
    opts: &FieldOptions,
) -> Result<Vec<f64>> {
    if pose.len() != field.parts || canon.len() != field.parts {
        return Err(shape(format!(
            "tri-plane has {} parts, pose {}, canonical pose {}",
            field.parts,
            pose.len(),
            canon.len()
        )));
    }
    let r = field.as_ref();
    let mut gathered = Vec::with_capacity(field.parts);
    for k in 0..field.parts {
        let map = CanonicalMap::new(&pose.parts()[k], &canon.parts()[k], opts.normalize_length);
        let xc = map.apply(x);
        if inside_cube(&xc, &canon.center(k), opts.cube_half_width) {
            gathered.push((k, xc));
        }
    }
    let mut out = vec![0.0; FEATURE_CHANNELS];
    let mut fk = [0.0; FEATURE_CHANNELS];
    for (k, xc) in gathered {
        let taps = plane_taps(&xc, r.extent, r.resolution);
        let p: f64 = r
            .prob_logits(&taps, k)
            .iter()
            .map(|&l| logistic(l))
            .product();
        fk.fill(0.0);
        r.add_features(&taps, 1.0, &mut fk);
        for (o, f) in out.iter_mut().zip(&fk) {
            *o += p * f;
        }
    }
    Ok(out)
}

/// Gradient of `d_out · feature_at(x)` with respect to the feature planes
/// and the probability planes, shaped like `field.features` and `field.probs`.
pub fn feature_at_backward(
    field: &TriPlaneField,
    x: &Vec3,
    pose: &PoseConfig,
    canon: &CanonicalPose,
    opts: &FieldOptions,
    d_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if d_out.len() != FEATURE_CHANNELS {
        return Err(shape(format!(
            "expected {FEATURE_CHANNELS} output gradients, got {}",
            d_out.len()
        )));
    }
    if pose.len() != field.parts || canon.len() != field.parts {
        return Err(shape(
            "tri-plane, pose and canonical pose disagree on part count",
        ));
    }
    let r = field.as_ref();
    let (nf, np) = (r.feature_plane_len(), r.prob_plane_len());
    let mut d_feat = vec![0.0; field.features.len()];
    let mut d_prob = vec![0.0; field.probs.len()];
    let mut fk = [0.0; FEATURE_CHANNELS];
    for k in 0..field.parts {
        let map = CanonicalMap::new(&pose.parts()[k], &canon.parts()[k], opts.normalize_length);
        let xc = map.apply(x);
        if !inside_cube(&xc, &canon.center(k), opts.cube_half_width) {
            continue;
        }
        let taps = plane_taps(&xc, r.extent, r.resolution);
        let s = r.prob_logits(&taps, k).map(logistic);
        let p = s[0] * s[1] * s[2];
        fk.fill(0.0);
        r.add_features(&taps, 1.0, &mut fk);
        let d_p: f64 = fk.iter().zip(d_out).map(|(f, d)| f * d).sum();
        for (pl, t) in taps.iter().enumerate() {
            scatter_add(
                &mut d_feat[pl * nf..(pl + 1) * nf],
                FEATURE_CHANNELS,
                t,
                p,
                d_out,
            );
            // dp/dl = p (1 − s) for the logistic of this plane's logit
            let d_logit = d_p * p * (1.0 - s[pl]);
            let plane = &mut d_prob[pl * np..(pl + 1) * np];
            for i in 0..4 {
                plane[t.texel[i] * field.parts + k] += t.weight[i] * d_logit;
            }
        }
    }
    Ok((d_feat, d_prob))
}

/// Per-plane 2D offsets `(du, dv)` in normalized plane units, stored
/// `[plane][row][col][2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub resolution: usize,
    pub data: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            data: vec![0.0; 3 * resolution * resolution * 2],
        }
    }

    pub fn constant(resolution: usize, du: f64, dv: f64) -> Self {
        let mut d = Self::zeros(resolution);
        for px in d.data.chunks_mut(2) {
            px[0] = du;
            px[1] = dv;
        }
        d
    }
}

/// Resamples every feature plane at `uv + deform(uv)`; probability planes are
/// carried over unchanged.
pub fn warp_planes(field: &TriPlaneField, deform: &DeformationField) -> Result<TriPlaneField> {
    if deform.resolution != field.resolution
        || deform.data.len() != 3 * field.resolution * field.resolution * 2
    {
        return Err(shape(format!(
            "deformation resolution {} does not match tri-plane resolution {}",
            deform.resolution, field.resolution
        )));
    }
    let mut out = field.clone();
    warp_features(
        &field.features,
        &deform.data,
        field.resolution,
        FEATURE_CHANNELS,
        &mut out.features,
    );
    Ok(out)
}

/// Warps three stacked `channels`-wide planes by a `[3][R][R][2]` offset field.
pub fn warp_features(src: &[f64], deform: &[f64], res: usize, channels: usize, out: &mut [f64]) {
    let n = res * res;
    let half = (res - 1) as f64 / 2.0;
    for p in 0..3 {
        let s = &src[p * n * channels..(p + 1) * n * channels];
        let o = &mut out[p * n * channels..(p + 1) * n * channels];
        let d = &deform[p * n * 2..(p + 1) * n * 2];
        for row in 0..res {
            for col in 0..res {
                let t = row * res + col;
                let taps = taps_at(
                    col as f64 + d[2 * t] * half,
                    row as f64 + d[2 * t + 1] * half,
                    res,
                );
                let dst = &mut o[t * channels..(t + 1) * channels];
                dst.fill(0.0);
                gather_add(s, channels, &taps, 1.0, dst);
            }
        }
    }
}

/// Adjoint of [`warp_features`]. Accumulates into `d_src` and `d_deform`;
/// offsets that land outside the grid get zero gradient along the clamped axis.
pub fn warp_features_backward(
    src: &[f64],
    deform: &[f64],
    res: usize,
    channels: usize,
    d_out: &[f64],
    d_src: &mut [f64],
    d_deform: &mut [f64],
) {
    let n = res * res;
    let half = (res - 1) as f64 / 2.0;
    let max = (res - 1) as f64;
    for p in 0..3 {
        let s = &src[p * n * channels..(p + 1) * n * channels];
        let ds = &mut d_src[p * n * channels..(p + 1) * n * channels];
        let go = &d_out[p * n * channels..(p + 1) * n * channels];
        let d = &deform[p * n * 2..(p + 1) * n * 2];
        let dd = &mut d_deform[p * n * 2..(p + 1) * n * 2];
        for row in 0..res {
            for col in 0..res {
                let t = row * res + col;
                let g = &go[t * channels..(t + 1) * channels];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let gx = col as f64 + d[2 * t] * half;
                let gy = row as f64 + d[2 * t + 1] * half;
                let taps = taps_at(gx, gy, res);
                scatter_add(ds, channels, &taps, 1.0, g);

                let cx = gx.clamp(0.0, max);
                let cy = gy.clamp(0.0, max);
                let fx = cx - (cx as usize).min(res - 2) as f64;
                let fy = cy - (cy as usize).min(res - 2) as f64;
                let rows: [&[f64]; 4] = std::array::from_fn(|i| {
                    &s[taps.texel[i] * channels..(taps.texel[i] + 1) * channels]
                });
                let (mut sx, mut sy) = (0.0, 0.0);
                for c in 0..channels {
                    let (v00, v10, v01, v11) = (rows[0][c], rows[1][c], rows[2][c], rows[3][c]);
                    sx += g[c] * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
                    sy += g[c] * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
                }
                if (0.0..=max).contains(&gx) {
                    dd[2 * t] += sx * half;
                }
                if (0.0..=max).contains(&gy) {
                    dd[2 * t + 1] += sy * half;
                }
            }
        }
    }
}

/// Mean squared feature value (probability planes excluded).
pub fn triplane_l2(field: &TriPlaneField) -> f64 {
    features_l2(&field.features)
}

pub fn features_l2(features: &[f64]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    features.iter().map(|v| v * v).sum::<f64>() / features.len() as f64
}
