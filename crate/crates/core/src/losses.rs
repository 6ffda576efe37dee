//! Reconstruction, KL and adversarial objectives and the 3D patch discriminator.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PixelLoss};
use crate::graph::{ConvSpec, Graph, Var};
use crate::latent::{kl_var, GaussianLatent};
use crate::nn::{Conv3d, Init};
use crate::params::{Builder, Session};
use crate::{Error, Real, Result, Tensor};

const SOBEL_EPS: f64 = 1e-6;
const LEAK: f64 = 0.2;

/// L1 distance between two equally shaped vars.
pub fn pixel_loss_var<F: Real>(g: &mut Graph<F>, xhat: Var, x: Var) -> Result<Var> {
    let d = g.sub(xhat, x)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// The configured pixel reconstruction term.
pub fn pixel_term_var<F: Real>(g: &mut Graph<F>, xhat: Var, x: Var, norm: PixelLoss) -> Result<Var> {
    match norm {
        PixelLoss::L1 => pixel_loss_var(g, xhat, x),
        PixelLoss::L2 => {
            let d = g.sub(xhat, x)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
    }
}

/// Sobel gradient magnitude of every (channel, frame) plane of a (C, T, H, W)
/// var, computed without padding: (1, C*T, H-2, W-2).
fn gradient_magnitude<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let planes = g.reshape(x, &[1, s[0] * s[1], s[2], s[3]])?;
    let eighth = 1.0 / 8.0;
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let k: Vec<F> = gx.iter().chain(&gy).map(|&v| F::from_f64(v * eighth)).collect();
    let w = g.constant(Tensor::from_vec(&[2, 1, 1, 3, 3], k)?);
    let d = g.conv3d(planes, w, None, ConvSpec { stride: [1, 1, 1], pad: [0, 0, 0] })?;
    let sq = g.square(d);
    let n = g.shape(sq)[1..].to_vec();
    let sx = g.narrow(sq, 0, 0, 1)?;
    let sy = g.narrow(sq, 0, 1, 1)?;
    let sum = g.add(sx, sy)?;
    let sum = g.add_scalar(sum, F::from_f64(SOBEL_EPS));
    let mag = g.sqrt(sum);
    g.reshape(mag, &[1, n[0], n[1], n[2]])
}

/// 2x2 average pooling of every plane of a (1, P, H, W) var.
fn avg_pool2<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let w = g.constant(Tensor::full(&[1, 1, 1, 2, 2], F::from_f64(0.25)));
    g.conv3d(x, w, None, ConvSpec { stride: [1, 2, 2], pad: [0, 0, 0] })
}

/// Perceptual surrogate: mean absolute difference of per-frame Sobel gradient
/// magnitudes, averaged over the full and the 2x-downsampled scale.
pub fn perceptual_loss_var<F: Real>(g: &mut Graph<F>, xhat: Var, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = |g: &mut Graph<F>, v: Var| g.reshape(v, &[1, s[0] * s[1], s[2], s[3]]);
    let mut terms = Vec::with_capacity(2);
    let (mut a, mut b) = (xhat, x);
    for scale in 0..2 {
        let (ma, mb) = (gradient_magnitude(g, a)?, gradient_magnitude(g, b)?);
        terms.push(pixel_loss_var(g, ma, mb)?);
        if scale == 0 {
            let (fa, fb) = (flat(g, a)?, flat(g, b)?);
            let (pa, pb) = (avg_pool2(g, fa)?, avg_pool2(g, fb)?);
            let half = [s[0], s[1], s[2] / 2, s[3] / 2];
            a = g.reshape(pa, &half)?;
            b = g.reshape(pb, &half)?;
        }
    }
    let sum = g.add(terms[0], terms[1])?;
    Ok(g.scale(sum, F::from_f64(0.5)))
}

/// Pluggable perceptual scorer over plain tensors.
pub trait PerceptualScorer {
    fn score(&self, xhat: &Tensor<f64>, x: &Tensor<f64>) -> Result<f64>;
}

/// The built-in gradient-magnitude surrogate.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientSurrogate;

impl PerceptualScorer for GradientSurrogate {
    fn score(&self, xhat: &Tensor<f64>, x: &Tensor<f64>) -> Result<f64> {
        Ok(recon_loss(xhat, x)?.1)
    }
}

fn check_pair<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() != 4 {
        return Err(Error::shape(format!("expected a (C, T, H, W) tensor, got {:?}", a.shape())));
    }
    Ok(())
}

/// (pixel L1, perceptual surrogate) between a reconstruction and its target.
pub fn recon_loss<F: Real>(xhat: &Tensor<F>, x: &Tensor<F>) -> Result<(f64, f64)> {
    check_pair(xhat, x)?;
    let mut g = Graph::<F>::new();
    let (a, b) = (g.constant(xhat.clone()), g.constant(x.clone()));
    let p = pixel_loss_var(&mut g, a, b)?;
    let q = perceptual_loss_var(&mut g, a, b)?;
    Ok((g.value(p).item().as_f64(), g.value(q).item().as_f64()))
}

/// Hinge losses: `(mean relu(1 - real) + mean relu(1 + fake), -mean fake)`.
pub fn gan_losses<F: Real>(d_real: &Tensor<F>, d_fake: &Tensor<F>) -> Result<(f64, f64)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::shape("logit maps must have equal shapes"));
    }
    let mut g = Graph::<F>::new();
    let (r, f) = (g.constant(d_real.clone()), g.constant(d_fake.clone()));
    let d = d_loss_var(&mut g, r, f)?;
    let gl = g_loss_var(&mut g, f);
    Ok((g.value(d).item().as_f64(), g.value(gl).item().as_f64()))
}

pub fn d_loss_var<F: Real>(g: &mut Graph<F>, real: Var, fake: Var) -> Result<Var> {
    let nr = g.scale(real, -F::one());
    let nr = g.add_scalar(nr, F::one());
    let lr = g.relu(nr);
    let lr = g.mean(lr);
    let pf = g.add_scalar(fake, F::one());
    let lf = g.relu(pf);
    let lf = g.mean(lf);
    g.add(lr, lf)
}

pub fn g_loss_var<F: Real>(g: &mut Graph<F>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -F::one())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    Video,
    /// Every frame judged on its own through the central temporal kernel slice.
    Image,
}

/// Four-layer spatiotemporal patch discriminator.
#[derive(Clone, Debug)]
pub struct Discriminator3D {
    pub convs: [Conv3d; 4],
}

impl Discriminator3D {
    pub const STRIDES: [[usize; 3]; 4] = [[1, 2, 2], [2, 2, 2], [2, 2, 2], [1, 1, 1]];

    pub fn new<F: Real>(b: &mut Builder<'_, F>, in_channels: usize, width: usize) -> Result<Self> {
        let chans = [in_channels, width, 2 * width, 4 * width, 1];
        let mut make = |i: usize| {
            Conv3d::new(
                &mut b.push(i),
                chans[i],
                chans[i + 1],
                [3, 3, 3],
                ConvSpec { stride: Self::STRIDES[i], pad: [1, 1, 1] },
                Init::FanIn,
            )
        };
        Ok(Discriminator3D { convs: [make(0)?, make(1)?, make(2)?, make(3)?] })
    }

    /// Logit map (1, t'', h'', w''). Image mode keeps one logit plane per input frame.
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, mode: DiscMode) -> Result<Var> {
        let t = s.shape(x).get(1).copied().unwrap_or(0);
        if mode == DiscMode::Video && t < 4 {
            return Err(Error::shape(format!("video discrimination needs at least 4 frames, got {t}")));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = match mode {
                DiscMode::Video => conv.forward(s, h)?,
                DiscMode::Image => conv.forward_framewise(s, h)?,
            };
            if i + 1 < self.convs.len() {
                h = s.graph.leaky_relu(h, F::from_f64(LEAK));
            }
        }
        Ok(h)
    }
}

/// Scalar record of one step's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub recon_pixel: f64,
    pub recon_perceptual: f64,
    pub kl: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub lambda_kl: f64,
    pub lambda_perceptual: f64,
    pub lambda_gan: f64,
}

impl LossReport {
    pub fn recomputed_total(&self) -> f64 {
        self.recon_pixel + self.lambda_perceptual * self.recon_perceptual + self.lambda_kl * self.kl + self.lambda_gan * self.gan_g
    }

    /// Term-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.recon_pixel += r.recon_pixel / n;
            m.recon_perceptual += r.recon_perceptual / n;
            m.kl += r.kl / n;
            m.gan_g += r.gan_g / n;
            m.gan_d += r.gan_d / n;
        }
        if let Some(r) = reports.first() {
            m.lambda_kl = r.lambda_kl;
            m.lambda_perceptual = r.lambda_perceptual;
            m.lambda_gan = r.lambda_gan;
        }
        m
    }

    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon_pixel", self.recon_pixel),
            ("recon_perceptual", self.recon_perceptual),
            ("kl", self.kl),
            ("gan_g", self.gan_g),
            ("gan_d", self.gan_d),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Adversarial weight in effect at `step`.
pub fn effective_gan_weight(cfg: &ModelConfig, step: u64) -> f64 {
    if step < cfg.gan_warmup_steps {
        0.0
    } else {
        cfg.lambda_gan
    }
}

/// The objective as graph nodes plus the partially filled report.
pub struct LossTerms {
    pub total: Var,
    pub report: LossReport,
}

/// Builds the weighted objective. `moments` is `None` on image steps (no KL);
/// `d_fake` is only consulted when the adversarial weight is non-zero.
pub fn total_loss_var<F: Real>(
    g: &mut Graph<F>,
    xhat: Var,
    x: Var,
    moments: Option<(Var, Var)>,
    d_fake: Option<Var>,
    step: u64,
    cfg: &ModelConfig,
) -> Result<LossTerms> {
    let lambda_gan = effective_gan_weight(cfg, step);
    let pixel = pixel_term_var(g, xhat, x, cfg.pixel_loss)?;
    let perc = perceptual_loss_var(g, xhat, x)?;
    let mut report = LossReport {
        recon_pixel: g.value(pixel).item().as_f64(),
        recon_perceptual: g.value(perc).item().as_f64(),
        lambda_kl: cfg.lambda_kl,
        lambda_perceptual: cfg.lambda_perceptual,
        lambda_gan,
        ..Default::default()
    };
    let wp = g.scale(perc, F::from_f64(cfg.lambda_perceptual));
    let mut total = g.add(pixel, wp)?;
    if let Some((mean, log_var)) = moments {
        let kl = kl_var(g, mean, log_var)?;
        report.kl = g.value(kl).item().as_f64();
        let wk = g.scale(kl, F::from_f64(cfg.lambda_kl));
        total = g.add(total, wk)?;
    }
    if lambda_gan > 0.0 {
        let fake = d_fake.ok_or_else(|| Error::invalid("adversarial term is active but no discriminator output was given"))?;
        let gl = g_loss_var(g, fake);
        report.gan_g = g.value(gl).item().as_f64();
        let wg = g.scale(gl, F::from_f64(lambda_gan));
        total = g.add(total, wg)?;
    }
    report.total = g.value(total).item().as_f64();
    Ok(LossTerms { total, report })
}

/// Plain-tensor form of [`total_loss_var`].
pub fn total_loss<F: Real>(
    xhat: &Tensor<F>,
    x: &Tensor<F>,
    latent: Option<&GaussianLatent<F>>,
    d_fake: Option<&Tensor<F>>,
    step: u64,
    cfg: &ModelConfig,
) -> Result<LossReport> {
    check_pair(xhat, x)?;
    let mut g = Graph::<F>::new();
    let (a, b) = (g.constant(xhat.clone()), g.constant(x.clone()));
    let moments = latent.map(|l| (g.constant(l.mean.clone()), g.constant(l.log_var.clone())));
    let fake = d_fake.map(|d| g.constant(d.clone()));
    Ok(total_loss_var(&mut g, a, b, moments, fake, step, cfg)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, GroupSet, ParamStore};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn recon_closed_forms() {
        let mut rng = SeededRng::new(1);
        let x: Tensor<f64> = rng.uniform_tensor(&[3, 2, 16, 16], 0.8);
        assert_eq!(recon_loss(&x, &x).unwrap(), (0.0, 0.0));
        let shifted = x.map(|v| v + 0.1);
        let (p, q) = recon_loss(&shifted, &x).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
        assert!(q.abs() < 1e-9, "{q}");
        let y: Tensor<f64> = rng.uniform_tensor(&[3, 2, 16, 16], 1.0);
        let oracle = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64;
        assert!((recon_loss(&y, &x).unwrap().0 - oracle).abs() < 1e-12);
        assert!(recon_loss(&y, &x).unwrap().1 > 0.0);
        assert!(recon_loss(&y, &Tensor::zeros(&[3, 2, 8, 16])).is_err());
    }

    /// Direct loop evaluation of the surrogate at full scale only.
    fn sobel_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let s = a.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mag = |t: &Tensor<f64>, p: usize, y: usize, x: usize| {
            let at = |dy: usize, dx: usize| t.data()[(p * h + y + dy) * w + x + dx];
            let gx = (at(0, 2) + 2.0 * at(1, 2) + at(2, 2) - at(0, 0) - 2.0 * at(1, 0) - at(2, 0)) / 8.0;
            let gy = (at(2, 0) + 2.0 * at(2, 1) + at(2, 2) - at(0, 0) - 2.0 * at(0, 1) - at(0, 2)) / 8.0;
            (gx * gx + gy * gy + SOBEL_EPS).sqrt()
        };
        let mut acc = 0.0;
        for p in 0..planes {
            for y in 0..h - 2 {
                for x in 0..w - 2 {
                    acc += (mag(a, p, y, x) - mag(b, p, y, x)).abs();
                }
            }
        }
        acc / (planes * (h - 2) * (w - 2)) as f64
    }

    #[test]
    fn perceptual_matches_loop_oracle() {
        let mut rng = SeededRng::new(2);
        let a: Tensor<f64> = rng.uniform_tensor(&[1, 2, 8, 8], 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(&[1, 2, 8, 8], 1.0);
        let pool = |t: &Tensor<f64>| {
            Tensor::from_fn(&[1, 2, 4, 4], |i| {
                let (p, y, x) = (i / 16, (i / 4) % 4, i % 4);
                let at = |dy: usize, dx: usize| t.data()[p * 64 + (2 * y + dy) * 8 + 2 * x + dx];
                (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
            })
        };
        let oracle = 0.5 * (sobel_oracle(&a, &b) + sobel_oracle(&pool(&a), &pool(&b)));
        assert!((recon_loss(&a, &b).unwrap().1 - oracle).abs() < 1e-12);
    }

    #[test]
    fn hinge_closed_forms() {
        let one = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
        let (d, g) = gan_losses(&one, &one.map(|v| -v)).unwrap();
        assert_eq!((d, g), (0.0, 1.0));
        let z = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert_eq!(gan_losses(&z, &z).unwrap(), (2.0, 0.0));
    }

    proptest! {
        #[test]
        fn hinge_matches_loop_and_d_is_nonnegative(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let r: Tensor<f64> = rng.normal_tensor(&[1, 2, 3, 3]);
            let f: Tensor<f64> = rng.normal_tensor(&[1, 2, 3, 3]).map(|v| 3.0 * v);
            let n = r.numel() as f64;
            let d_oracle = r.data().iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / n
                + f.data().iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / n;
            let g_oracle = -f.data().iter().sum::<f64>() / n;
            let (d, g) = gan_losses(&r, &f).unwrap();
            prop_assert!((d - d_oracle).abs() < 1e-12);
            prop_assert!((g - g_oracle).abs() < 1e-12);
            prop_assert!(d >= 0.0);
        }
    }

    #[test]
    fn warmup_and_report_invariant() {
        let cfg = ModelConfig { gan_warmup_steps: 10, lambda_gan: 0.5, ..Default::default() };
        let mut rng = SeededRng::new(3);
        let x: Tensor<f64> = rng.uniform_tensor(&[3, 4, 8, 8], 1.0);
        let xh: Tensor<f64> = rng.uniform_tensor(&[3, 4, 8, 8], 1.0);
        let lat = GaussianLatent::new(rng.normal_tensor(&[4, 1, 1, 1]), rng.normal_tensor(&[4, 1, 1, 1])).unwrap();
        let fake: Tensor<f64> = rng.normal_tensor(&[1, 1, 1, 1]);
        let before = total_loss(&xh, &x, Some(&lat), Some(&fake), 9, &cfg).unwrap();
        assert_eq!(before.lambda_gan, 0.0);
        assert_eq!(before.gan_g, 0.0);
        let after = total_loss(&xh, &x, Some(&lat), Some(&fake), 10, &cfg).unwrap();
        assert_eq!(after.lambda_gan, 0.5);
        assert!((after.total - before.total - 0.5 * after.gan_g).abs() < 1e-12);
        for r in [before, after] {
            assert!((r.total - r.recomputed_total()).abs() < 1e-9);
        }
        let quiet = ModelConfig { lambda_kl: 0.0, lambda_gan: 0.0, ..cfg };
        assert_eq!(total_loss(&x, &x, Some(&lat), Some(&fake), 100, &quiet).unwrap().total, 0.0);
    }

    fn disc(store: &mut ParamStore<f64>) -> Discriminator3D {
        let mut rng = SeededRng::new(4);
        Discriminator3D::new(&mut Builder::new(store, &mut rng, "disc", Group::Discriminator), 3, 4).unwrap()
    }

    fn judge(store: &ParamStore<f64>, d: &Discriminator3D, x: &Tensor<f64>, mode: DiscMode) -> Result<Tensor<f64>> {
        let mut s = Session::new(store, GroupSet::NONE);
        let xv = s.constant(x.clone());
        let y = d.forward(&mut s, xv, mode)?;
        Ok(s.value(y).clone())
    }

    #[test]
    fn discriminator_shapes_follow_stride_arithmetic() {
        let mut store = ParamStore::new();
        let d = disc(&mut store);
        let x = Tensor::<f64>::zeros(&[3, 16, 64, 64]);
        assert_eq!(judge(&store, &d, &x, DiscMode::Video).unwrap().shape(), &[1, 4, 8, 8]);
        assert_eq!(judge(&store, &d, &x, DiscMode::Image).unwrap().shape(), &[1, 16, 8, 8]);
        assert!(judge(&store, &d, &Tensor::zeros(&[3, 1, 16, 16]), DiscMode::Video).is_err());
    }

    #[test]
    fn image_mode_is_framewise() {
        let mut store = ParamStore::new();
        let d = disc(&mut store);
        let mut rng = SeededRng::new(5);
        let f: Tensor<f64> = rng.uniform_tensor(&[3, 1, 16, 16], 1.0);
        let stat = Tensor::concat(&[&f, &f, &f, &f], 1).unwrap();
        let y = judge(&store, &d, &stat, DiscMode::Image).unwrap();
        let plane = y.numel() / 4;
        for t in 1..4 {
            assert_eq!(&y.data()[t * plane..(t + 1) * plane], &y.data()[..plane]);
        }

        let v: Tensor<f64> = rng.uniform_tensor(&[3, 4, 16, 16], 1.0);
        let order = [2usize, 0, 3, 1];
        let frames: Vec<Tensor<f64>> = order.iter().map(|&i| v.narrow(1, i, 1).unwrap()).collect();
        let permuted = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 1).unwrap();
        let yi = judge(&store, &d, &v, DiscMode::Image).unwrap();
        let yp = judge(&store, &d, &permuted, DiscMode::Image).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(yp.narrow(1, k, 1).unwrap(), yi.narrow(1, i, 1).unwrap());
        }
        let (a, b) = (judge(&store, &d, &v, DiscMode::Video).unwrap(), judge(&store, &d, &permuted, DiscMode::Video).unwrap());
        assert!(a.max_abs_diff(&b) > 1e-9);
    }
}
