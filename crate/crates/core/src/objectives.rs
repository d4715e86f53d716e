//! Training losses and image-quality metrics.

use crate::error::{shape, validation, Result};
use crate::image::Image;
use crate::renderer::Composite;
use crate::triplane::logistic;

/// Scores are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const SCORE_EPS: f64 = 1e-7;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Ground truth for one ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayTarget {
    pub rgb: [f64; 3],
    pub mask: f64,
}

fn check_batch(pred: &[Composite], target: &[RayTarget]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(shape(format!(
            "{} predictions, {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Batch mean of `‖C − Ĉ‖² + (M − M̂)²`; zero for an empty batch.
pub fn dso_loss(pred: &[Composite], target: &[RayTarget]) -> Result<f64> {
    check_batch(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            (0..3).map(|c| (p.rgb[c] - t.rgb[c]).powi(2)).sum::<f64>() + (p.mask - t.mask).powi(2)
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`dso_loss`] with respect to each ray's `(C, M)`.
pub fn dso_loss_grad(pred: &[Composite], target: &[RayTarget]) -> Result<Vec<Composite>> {
    check_batch(pred, target)?;
    let s = 2.0 / pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| dso_ray_grad(p, t, s))
        .collect())
}

/// `s · (C − Ĉ, M − M̂)`, the per-ray gradient of the reconstruction loss
/// scaled by `s = 2 / batch`.
#[inline]
pub fn dso_ray_grad(p: &Composite, t: &RayTarget, s: f64) -> Composite {
    Composite {
        rgb: [
            s * (p.rgb[0] - t.rgb[0]),
            s * (p.rgb[1] - t.rgb[1]),
            s * (p.rgb[2] - t.rgb[2]),
        ],
        mask: s * (p.mask - t.mask),
        inv_depth: 0.0,
    }
}

fn check_masks(mask: &Image, bones: &Image) -> Result<()> {
    if mask.channels != 1 || bones.channels != 1 {
        return Err(shape("bone loss expects single-channel images"));
    }
    mask.check_same_shape(bones, "bone image")
}

/// `Σ (1 − M)² B / Σ B`, or 0 when the bone image is empty.
pub fn bone_loss(mask: &Image, bones: &Image) -> Result<f64> {
    check_masks(mask, bones)?;
    let total: f64 = bones.data.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let s: f64 = mask
        .data
        .iter()
        .zip(&bones.data)
        .map(|(m, b)| (1.0 - m).powi(2) * b)
        .sum();
    Ok(s / total)
}

/// Gradient of [`bone_loss`] with respect to the mask.
pub fn bone_loss_grad(mask: &Image, bones: &Image) -> Result<Image> {
    check_masks(mask, bones)?;
    let total: f64 = bones.data.iter().sum();
    let mut g = Image::zeros(mask.width, mask.height, 1);
    if total > 0.0 {
        for (o, (m, b)) in g.data.iter_mut().zip(mask.data.iter().zip(&bones.data)) {
            *o = -2.0 * (1.0 - m) * b / total;
        }
    }
    Ok(g)
}

#[inline]
fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// `(L_G, L_D)` with `L_G = −E[log D(fake)]` and
/// `L_D = −E[log D(real)] − E[log(1 − D(fake))]` on post-logistic scores.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let lg = -mean(d_fake.iter().map(|&s| clamp_score(s).ln()), d_fake.len());
    let lr = -mean(d_real.iter().map(|&s| clamp_score(s).ln()), d_real.len());
    let lf = -mean(
        d_fake.iter().map(|&s| (1.0 - clamp_score(s)).ln()),
        d_fake.len(),
    );
    (lg, lr + lf)
}

/// Gradient of `L_G` with respect to each fake score (zero where clamped).
pub fn generator_loss_grad(d_fake: &[f64]) -> Vec<f64> {
    let n = d_fake.len().max(1) as f64;
    d_fake
        .iter()
        .map(|&s| {
            if s == clamp_score(s) {
                -1.0 / (n * s)
            } else {
                0.0
            }
        })
        .collect()
}

/// A discriminator exposing its pre-logistic output and the input gradient of it.
pub trait Discriminator {
    fn logit(&self, x: &Image) -> f64;
    fn input_grad(&self, x: &Image) -> Image;

    fn score(&self, x: &Image) -> f64 {
        logistic(self.logit(x))
    }
}

/// `D(x) = w · x + b` over all pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDiscriminator {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Discriminator for LinearDiscriminator {
    fn logit(&self, x: &Image) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(&x.data)
                .map(|(w, v)| w * v)
                .sum::<f64>()
    }

    fn input_grad(&self, x: &Image) -> Image {
        Image {
            width: x.width,
            height: x.height,
            channels: x.channels,
            data: self.weights.clone(),
        }
    }
}

/// `E ‖∇_x D(x)‖²` over the real images.
pub fn r1_penalty<D: Discriminator + ?Sized>(disc: &D, real: &[Image]) -> f64 {
    mean(
        real.iter()
            .map(|x| disc.input_grad(x).data.iter().map(|g| g * g).sum::<f64>()),
        real.len(),
    )
}

fn check_pair(pred: &Image, target: &Image) -> Result<()> {
    pred.check_same_shape(target, "metric target")?;
    if pred.data.is_empty() {
        return Err(validation("metrics need a non-empty image"));
    }
    Ok(())
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.data.len() as f64)
}

/// `−10 log10(MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over valid
/// window positions, averaged over positions and channels.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(validation(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}"
        )));
    }
    let g = gaussian_window();
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = ((oy + dy) * w + ox + dx) * ch + c;
                        let (a, b) = (pred.data[i], target.data[i]);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (ow * oh * ch) as f64)
}

/// Mean of squares and its gradient `2 v / n`, accumulated into `grad`.
pub fn l2_with_grad(values: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let s = 2.0 * weight / n;
    for (g, v) in grad.iter_mut().zip(values) {
        *g += s * v;
    }
    values.iter().map(|v| v * v).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(
            w,
            h,
            c,
            (0..w * h * c).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dso_examples() {
        let p = vec![Composite {
            rgb: [0.5, 0.2, 0.1],
            mask: 0.7,
            inv_depth: 0.3,
        }];
        let t = vec![RayTarget {
            rgb: [0.5, 0.2, 0.1],
            mask: 0.7,
        }];
        assert_eq!(dso_loss(&p, &t).unwrap(), 0.0);
        let t2 = vec![RayTarget {
            rgb: [0.6, 0.2, 0.1],
            mask: 0.7,
        }];
        assert!((dso_loss(&p, &t2).unwrap() - 0.01).abs() < 1e-15);
        assert!(dso_loss(&p, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 37;
        let pred: Vec<Composite> = (0..n)
            .map(|_| Composite {
                rgb: [rng.random(), rng.random(), rng.random()],
                mask: rng.random(),
                inv_depth: 0.0,
            })
            .collect();
        let tgt: Vec<RayTarget> = (0..n)
            .map(|_| RayTarget {
                rgb: [rng.random(), rng.random(), rng.random()],
                mask: rng.random(),
            })
            .collect();
        let mut naive = 0.0;
        for i in 0..n {
            for c in 0..3 {
                naive += (pred[i].rgb[c] - tgt[i].rgb[c]) * (pred[i].rgb[c] - tgt[i].rgb[c]);
            }
            naive += (pred[i].mask - tgt[i].mask) * (pred[i].mask - tgt[i].mask);
        }
        assert!((dso_loss(&pred, &tgt).unwrap() - naive / n as f64).abs() < 1e-12);

        let g = dso_loss_grad(&pred, &tgt).unwrap();
        let h = 1e-6;
        for i in [0, 5, 36] {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a[i].mask += h;
            b[i].mask -= h;
            let fd = (dso_loss(&a, &tgt).unwrap() - dso_loss(&b, &tgt).unwrap()) / (2.0 * h);
            assert!((fd - g[i].mask).abs() < 1e-8);
        }
    }

    #[test]
    fn bone_loss_examples() {
        let mut bones = Image::zeros(4, 4, 1);
        for i in [1, 5, 9] {
            bones.data[i] = 1.0;
        }
        assert_eq!(
            bone_loss(&Image::filled(4, 4, 1, 1.0), &bones).unwrap(),
            0.0
        );
        assert_eq!(bone_loss(&Image::zeros(4, 4, 1), &bones).unwrap(), 1.0);
        assert_eq!(
            bone_loss(&Image::filled(4, 4, 1, 0.5), &bones).unwrap(),
            0.25
        );
        assert_eq!(
            bone_loss(&Image::zeros(4, 4, 1), &Image::zeros(4, 4, 1)).unwrap(),
            0.0
        );
        assert!(bone_loss(&Image::zeros(4, 4, 1), &Image::zeros(4, 3, 1)).is_err());

        let m = random_image(4, 4, 1, 3);
        let g = bone_loss_grad(&m, &bones).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut a = m.clone();
            let mut b = m.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (bone_loss(&a, &bones).unwrap() - bone_loss(&b, &bones).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn adversarial_examples() {
        let (lg, ld) = adversarial_losses(&[0.5], &[0.5]);
        assert!((lg - 2f64.ln()).abs() < 1e-12);
        assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
        let (lg, _) = adversarial_losses(&[0.5], &[1.0 - 1e-12]);
        assert!(lg < 1e-6);
        let (lg, ld) = adversarial_losses(&[0.0, 2.0], &[1.0, -1.0]);
        assert!(lg.is_finite() && ld.is_finite());

        let real = [0.9, 0.3, 0.55, 0.01];
        let fake = [0.2, 0.7, 0.45];
        let lg_naive = -(fake.iter().map(|s: &f64| s.ln()).sum::<f64>()) / 3.0;
        let ld_naive = -(real.iter().map(|s: &f64| s.ln()).sum::<f64>()) / 4.0
            - fake.iter().map(|s: &f64| (1.0 - s).ln()).sum::<f64>() / 3.0;
        let (lg, ld) = adversarial_losses(&real, &fake);
        assert!((lg - lg_naive).abs() < 1e-12);
        assert!((ld - ld_naive).abs() < 1e-12);

        let g = generator_loss_grad(&fake);
        let h = 1e-7;
        for i in 0..3 {
            let mut a = fake;
            let mut b = fake;
            a[i] += h;
            b[i] -= h;
            let fd =
                (adversarial_losses(&real, &a).0 - adversarial_losses(&real, &b).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn r1_examples() {
        let imgs = vec![random_image(3, 2, 3, 1), random_image(3, 2, 3, 2)];
        let constant = LinearDiscriminator {
            weights: vec![0.0; 18],
            bias: 0.3,
        };
        assert_eq!(r1_penalty(&constant, &imgs), 0.0);
        let sum = LinearDiscriminator {
            weights: vec![1.0; 18],
            bias: 0.0,
        };
        assert_eq!(r1_penalty(&sum, &imgs), 18.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        let lin = LinearDiscriminator {
            weights: w,
            bias: 0.1,
        };
        assert!((r1_penalty(&lin, &imgs) - norm2).abs() < 1e-9);
        // Input gradient agrees with finite differences of the logit.
        let x = &imgs[0];
        let g = lin.input_grad(x);
        for i in 0..18 {
            let mut a = x.clone();
            a.data[i] += 1e-6;
            let fd = (lin.logit(&a) - lin.logit(x)) / 1e-6;
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 3, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Image::zeros(10, 10, 1);
        let t = Image::filled(10, 10, 1, 0.1);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&z, &Image::zeros(10, 9, 1)).is_err());
    }

    /// Separable-filter formulation, independent of the direct loops above.
    fn ssim_reference(x: &Image, y: &Image) -> f64 {
        let g = gaussian_window();
        let (w, h, ch) = (x.width, x.height, x.channels);
        let (ow, oh) = (w - 10, h - 10);
        let filter = |f: &dyn Fn(usize) -> f64, c: usize| -> Vec<f64> {
            let mut rows = vec![0.0; ow * h];
            for yy in 0..h {
                for ox in 0..ow {
                    rows[yy * ow + ox] = (0..11)
                        .map(|k| g[k] * f(((yy * w) + ox + k) * ch + c))
                        .sum();
                }
            }
            let mut out = vec![0.0; ow * oh];
            for oy in 0..oh {
                for ox in 0..ow {
                    out[oy * ow + ox] = (0..11).map(|k| g[k] * rows[(oy + k) * ow + ox]).sum();
                }
            }
            out
        };
        let mut acc = 0.0;
        for c in 0..ch {
            let mx = filter(&|i| x.data[i], c);
            let my = filter(&|i| y.data[i], c);
            let xx = filter(&|i| x.data[i] * x.data[i], c);
            let yy = filter(&|i| y.data[i] * y.data[i], c);
            let xy = filter(&|i| x.data[i] * y.data[i], c);
            for i in 0..ow * oh {
                let num =
                    (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * (xy[i] - mx[i] * my[i]) + SSIM_C2);
                let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1)
                    * (xx[i] - mx[i] * mx[i] + yy[i] - my[i] * my[i] + SSIM_C2);
                acc += num / den;
            }
        }
        acc / (ow * oh * ch) as f64
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(20, 16, 3, 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(20, 16, 3, 6);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_reference(&a, &b)).abs() < 1e-6);
        assert!(s < 0.5);
        assert!(ssim(&Image::zeros(8, 8, 1), &Image::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn l2_gradient() {
        let v = [1.0, -2.0, 3.0];
        let mut g = [0.0; 3];
        let l = l2_with_grad(&v, 0.5, &mut g);
        assert!((l - 14.0 / 3.0).abs() < 1e-15);
        assert_eq!(g, [1.0 / 3.0, -2.0 / 3.0, 1.0]);
    }
}
