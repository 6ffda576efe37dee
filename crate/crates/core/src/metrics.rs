//! Reconstruction quality metrics, computed on [0, 1]-mapped pixels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, VideoTensor};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn unit_pair<F: Real>(a: &VideoTensor<F>, b: &VideoTensor<F>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let f = |v: &VideoTensor<F>| v.to_unit().data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    Ok((f(a), f(b)))
}

/// `10 log10(1 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<F: Real>(xhat: &VideoTensor<F>, x: &VideoTensor<F>) -> Result<f64> {
    let (a, b) = unit_pair(xhat, x)?;
    Ok(psnr_from_mse(mse(&a, &b)))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len().max(1) as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SIGMA * SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter of one plane without padding.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one (H, W) plane pair.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < WINDOW || w < WINDOW {
        return Err(Error::shape(format!("SSIM needs frames of at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (mu_a, mu_b) = (filter(a, h, w, &win), filter(b, h, w, &win));
    let (saa, sbb, sab) = (filter(&prod(a, a), h, w, &win), filter(&prod(b, b), h, w, &win), filter(&prod(a, b), h, w, &win));
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / n as f64)
}

/// SSIM per frame and channel, averaged.
pub fn ssim<F: Real>(xhat: &VideoTensor<F>, x: &VideoTensor<F>) -> Result<f64> {
    let (a, b) = unit_pair(xhat, x)?;
    let [c, t, h, w] = x.shape();
    let plane = h * w;
    let mut acc = 0.0;
    for p in 0..c * t {
        acc += ssim_plane(&a[p * plane..(p + 1) * plane], &b[p * plane..(p + 1) * plane], h, w)?;
    }
    Ok(acc / (c * t) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::Tensor;

    fn unit_video(shape: &[usize], f: impl FnMut(usize) -> f64) -> VideoTensor<f64> {
        VideoTensor::from_unit(Tensor::from_fn(shape, f)).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let x = unit_video(&[1, 1, 8, 8], |_| 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = unit_video(&[1, 1, 8, 8], |_| 0.6);
        assert!((psnr(&y, &x).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
        assert!(psnr(&x, &unit_video(&[1, 1, 8, 16], |_| 0.5)).is_err());
    }

    #[test]
    fn psnr_decreases_along_a_noise_ladder() {
        let mut rng = SeededRng::new(1);
        let base = Tensor::<f64>::from_fn(&[3, 1, 16, 16], |_| 0.25 + 0.5 * rng.uniform());
        let noise = Tensor::<f64>::from_fn(&[3, 1, 16, 16], |_| rng.uniform_range(-1.0, 1.0));
        let x = VideoTensor::from_unit(base.clone()).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let y = VideoTensor::from_unit(base.zip_map(&noise, |b, n| b + amp * n).unwrap()).unwrap();
            let p = psnr(&y, &x).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Window-by-window evaluation straight from the definition.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let win = gaussian_window();
        let mut total = 0.0;
        let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        let k = win[i] * win[j];
                        let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
        }
        total / (oh * ow) as f64
    }

    #[test]
    fn ssim_oracles() {
        let mut rng = SeededRng::new(2);
        let a = unit_video(&[3, 4, 16, 16], |_| rng.uniform());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = unit_video(&[1, 1, 16, 16], |_| 0.3);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);

        let check = unit_video(&[1, 1, 16, 16], |i| if ((i / 16) / 2 + (i % 16) / 2) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = VideoTensor::from_unit(check.to_unit().map(|v| 1.0 - v)).unwrap();
        assert!(ssim(&inv, &check).unwrap() < 0.5);

        let b = unit_video(&[3, 4, 16, 16], |_| rng.uniform());
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let (ua, ub) = (a.to_unit(), b.to_unit());
        let oracle = (0..12).map(|p| ssim_oracle(&ua.data()[p * 256..(p + 1) * 256], &ub.data()[p * 256..(p + 1) * 256], 16, 16)).sum::<f64>() / 12.0;
        assert!((s - oracle).abs() < 1e-9);
        assert!(ssim(&unit_video(&[1, 1, 8, 8], |_| 0.0), &unit_video(&[1, 1, 8, 8], |_| 0.0)).is_err());
    }

    #[test]
    fn permuted_frames_score_below_one() {
        let mut rng = SeededRng::new(3);
        let a = unit_video(&[1, 4, 16, 16], |_| rng.uniform());
        let u = a.to_unit();
        let frames: Vec<Tensor<f64>> = (0..4).map(|i| u.narrow(1, i, 1).unwrap()).collect();
        let swapped = Tensor::concat(&[&frames[1], &frames[0], &frames[3], &frames[2]], 1).unwrap();
        let b = VideoTensor::from_unit(swapped).unwrap();
        assert!(ssim(&a, &b).unwrap() < 1.0);
        let same = Tensor::concat(&[&frames[0], &frames[0], &frames[0], &frames[0]], 1).unwrap();
        let s = VideoTensor::from_unit(same).unwrap();
        assert!((ssim(&s, &VideoTensor::from_unit(s.to_unit()).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }
}
