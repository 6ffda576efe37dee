//! Forward/backward kernels on raw buffers behind the graph ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Mat};
use crate::Real;

/// 3D convolution geometry for a single (C, T, H, W) sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output positions `o` with `0 <= o*stride + k - pad < extent`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k { ((extent - 1 + pad - k) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let on = ot * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * on..(row + 1) * on];
                    row += 1;
                    let (wlo, whi) = valid_range(ow, sw, c, pw, iw);
                    for to in 0..ot {
                        let plane = &mut dst[to * oh * ow..(to + 1) * oh * ow];
                        let ti = (to * st + a) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            plane.fill(F::zero());
                            continue;
                        }
                        for ho in 0..oh {
                            let line = &mut plane[ho * ow..(ho + 1) * ow];
                            let hi = (ho * sh + b) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                line.fill(F::zero());
                                continue;
                            }
                            let src = &x[((ci * it + ti as usize) * ih + hi as usize) * iw..][..iw];
                            line[..wlo].fill(F::zero());
                            line[whi..].fill(F::zero());
                            if sw == 1 {
                                let s0 = wlo + c - pw;
                                line[wlo..whi].copy_from_slice(&src[s0..s0 + (whi - wlo)]);
                            } else {
                                for (wo, v) in line.iter_mut().enumerate().take(whi).skip(wlo) {
                                    *v = src[wo * sw + c - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let on = ot * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &col[row * on..(row + 1) * on];
                    row += 1;
                    let (wlo, whi) = valid_range(ow, sw, c, pw, iw);
                    for to in 0..ot {
                        let ti = (to * st + a) as isize - pt as isize;
                        if ti < 0 || ti >= it as isize {
                            continue;
                        }
                        for ho in 0..oh {
                            let hi = (ho * sh + b) as isize - ph as isize;
                            if hi < 0 || hi >= ih as isize {
                                continue;
                            }
                            let line = &src[(to * oh + ho) * ow..][..ow];
                            let dst = &mut dx[((ci * it + ti as usize) * ih + hi as usize) * iw..][..iw];
                            for wo in wlo..whi {
                                dst[wo * sw + c - pw] += line[wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `w` is (cout, cin * kvol) row-major; returns (cout, out_len).
pub(crate) fn conv3d_forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let on = g.out_len();
    let rows = g.cin * g.kvol();
    let mut out = vec![F::zero(); g.cout * on];
    if g.is_pointwise() {
        gemm(g.cout, rows, on, F::one(), Mat::row_major(w, rows), Mat::row_major(x, on), F::zero(), &mut out);
    } else {
        let mut col = vec![F::zero(); rows * on];
        im2col(x, g, &mut col);
        gemm(g.cout, rows, on, F::one(), Mat::row_major(w, rows), Mat::row_major(&col, on), F::zero(), &mut out);
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(on).enumerate() {
            let bv = b[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Accumulates gradients into whichever of `dx`, `dw`, `db` are present.
pub(crate) fn conv3d_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    g: &ConvGeom,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let on = g.out_len();
    let rows = g.cin * g.kvol();
    if let Some(db) = db {
        for (co, chunk) in dy.chunks(on).enumerate() {
            db[co] += chunk.iter().copied().sum::<F>();
        }
    }
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw {
        if pointwise {
            gemm(g.cout, on, rows, F::one(), Mat::row_major(dy, on), Mat::transposed(x, on), F::one(), dw);
        } else {
            let mut col = vec![F::zero(); rows * on];
            im2col(x, g, &mut col);
            gemm(g.cout, on, rows, F::one(), Mat::row_major(dy, on), Mat::transposed(&col, on), F::one(), dw);
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            gemm(rows, g.cout, on, F::one(), Mat::transposed(w, rows), Mat::row_major(dy, on), F::one(), dx);
        } else {
            let mut dcol = vec![F::zero(); rows * on];
            gemm(rows, g.cout, on, F::one(), Mat::transposed(w, rows), Mat::row_major(dy, on), F::zero(), &mut dcol);
            col2im(&dcol, g, dx);
        }
    }
}

/// Nearest-neighbour upsampling of (C, T, H, W) by per-axis integer factors.
pub(crate) fn upsample_forward<F: Real>(x: &[F], shape: &[usize], f: [usize; 3]) -> Vec<F> {
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ot, oh, ow) = (t * f[0], h * f[1], w * f[2]);
    let mut out = Vec::with_capacity(c * ot * oh * ow);
    let mut line = Vec::with_capacity(ow);
    for ci in 0..c {
        for to in 0..ot {
            let ti = to / f[0];
            for ho in 0..oh {
                let src = &x[((ci * t + ti) * h + ho / f[1]) * w..][..w];
                line.clear();
                for &v in src {
                    for _ in 0..f[2] {
                        line.push(v);
                    }
                }
                out.extend_from_slice(&line);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<F: Real>(dy: &[F], shape: &[usize], f: [usize; 3], dx: &mut [F]) {
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ot, oh, ow) = (t * f[0], h * f[1], w * f[2]);
    for ci in 0..c {
        for to in 0..ot {
            let ti = to / f[0];
            for ho in 0..oh {
                let src = &dy[((ci * ot + to) * oh + ho) * ow..][..ow];
                let dst = &mut dx[((ci * t + ti) * h + ho / f[1]) * w..][..w];
                for (wo, &g) in src.iter().enumerate() {
                    dst[wo / f[2]] += g;
                }
            }
        }
    }
}

/// Group normalization over (C, S): statistics per contiguous block of C/G channels.
pub(crate) struct NormStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn group_norm_forward<F: Real>(
    x: &[F],
    channels: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, NormStats<F>) {
    let s = x.len() / channels;
    let per = channels / groups;
    let glen = per * s;
    let n = F::from_f64(glen as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * glen..(gi + 1) * glen];
        let m = xs.iter().copied().sum::<F>() / n;
        let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
        let r = F::one() / (var + eps).sqrt();
        for ci in 0..per {
            let c = gi * per + ci;
            let (ga, be) = (gamma[c], beta[c]);
            let off = c * s;
            for j in off..off + s {
                y[j] = (x[j] - m) * r * ga + be;
            }
        }
        mean.push(m);
        rstd.push(r);
    }
    (y, NormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<F: Real>(
    x: &[F],
    dy: &[F],
    channels: usize,
    groups: usize,
    gamma: &[F],
    stats: &NormStats<F>,
    dx: Option<&mut [F]>,
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) {
    let s = x.len() / channels;
    let per = channels / groups;
    let n = F::from_f64((per * s) as f64);
    if let Some(dgamma) = dgamma {
        for c in 0..channels {
            let gi = c / per;
            let (m, r) = (stats.mean[gi], stats.rstd[gi]);
            let off = c * s;
            dgamma[c] += (off..off + s).map(|j| dy[j] * (x[j] - m) * r).sum::<F>();
        }
    }
    if let Some(dbeta) = dbeta {
        for c in 0..channels {
            dbeta[c] += dy[c * s..(c + 1) * s].iter().copied().sum::<F>();
        }
    }
    if let Some(dx) = dx {
        for gi in 0..groups {
            let (m, r) = (stats.mean[gi], stats.rstd[gi]);
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for ci in 0..per {
                let c = gi * per + ci;
                let off = c * s;
                for j in off..off + s {
                    let d = dy[j] * gamma[c];
                    sum_d += d;
                    sum_dx += d * (x[j] - m) * r;
                }
            }
            let (md, mdx) = (sum_d / n, sum_dx / n);
            for ci in 0..per {
                let c = gi * per + ci;
                let off = c * s;
                for j in off..off + s {
                    let xh = (x[j] - m) * r;
                    dx[j] += r * (dy[j] * gamma[c] - md - xh * mdx);
                }
            }
        }
    }
}

/// Layer normalization across the leading (channel) axis of a (C, N) buffer,
/// independently for each of the N positions.
pub(crate) fn channel_norm_forward<F: Real>(
    x: &[F],
    channels: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, NormStats<F>) {
    let npos = x.len() / channels;
    let cn = F::from_f64(channels as f64);
    let mut mean = vec![F::zero(); npos];
    let mut sq = vec![F::zero(); npos];
    for c in 0..channels {
        for (p, &v) in x[c * npos..(c + 1) * npos].iter().enumerate() {
            mean[p] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= cn);
    for c in 0..channels {
        for (p, &v) in x[c * npos..(c + 1) * npos].iter().enumerate() {
            let d = v - mean[p];
            sq[p] += d * d;
        }
    }
    let rstd: Vec<F> = sq.iter().map(|&s| F::one() / (s / cn + eps).sqrt()).collect();
    let mut y = vec![F::zero(); x.len()];
    for c in 0..channels {
        let (ga, be) = (gamma[c], beta[c]);
        for p in 0..npos {
            let j = c * npos + p;
            y[j] = (x[j] - mean[p]) * rstd[p] * ga + be;
        }
    }
    (y, NormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn channel_norm_backward<F: Real>(
    x: &[F],
    dy: &[F],
    channels: usize,
    gamma: &[F],
    stats: &NormStats<F>,
    dx: Option<&mut [F]>,
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) {
    let npos = x.len() / channels;
    let cn = F::from_f64(channels as f64);
    let xhat = |j: usize, p: usize| (x[j] - stats.mean[p]) * stats.rstd[p];
    if let Some(dgamma) = dgamma {
        for c in 0..channels {
            dgamma[c] += (0..npos).map(|p| dy[c * npos + p] * xhat(c * npos + p, p)).sum::<F>();
        }
    }
    if let Some(dbeta) = dbeta {
        for c in 0..channels {
            dbeta[c] += dy[c * npos..(c + 1) * npos].iter().copied().sum::<F>();
        }
    }
    if let Some(dx) = dx {
        let mut md = vec![F::zero(); npos];
        let mut mdx = vec![F::zero(); npos];
        for c in 0..channels {
            for p in 0..npos {
                let j = c * npos + p;
                let d = dy[j] * gamma[c];
                md[p] += d;
                mdx[p] += d * xhat(j, p);
            }
        }
        for c in 0..channels {
            for p in 0..npos {
                let j = c * npos + p;
                let d = dy[j] * gamma[c];
                dx[j] += stats.rstd[p] * (d - md[p] / cn - xhat(j, p) * mdx[p] / cn);
            }
        }
    }
}

/// Row-wise softmax over the last axis; masked-out columns get probability 0.
pub(crate) fn softmax_forward<F: Real>(x: &[F], cols: usize, mask: Option<&[bool]>) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for (row, out) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mx = (0..cols).filter(|&j| keep(j)).fold(F::neg_infinity(), |m, j| m.max(row[j]));
        let mut total = F::zero();
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - mx).exp();
                out[j] = e;
                total += e;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    }
    y
}

pub(crate) fn softmax_backward<F: Real>(y: &[F], dy: &[F], cols: usize, dx: &mut [F]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            dxr[j] += yr[j] * (dyr[j] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [it, ih, iw] = g.input;
        let [kt, kh, kw] = g.kernel;
        let [ot, oh, ow] = g.output;
        let mut out = vec![0.0; g.cout * ot * oh * ow];
        for co in 0..g.cout {
            for to in 0..ot {
                for ho in 0..oh {
                    for wo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for a in 0..kt {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let ti = (to * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let hi = (ho * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let wi = (wo * g.stride[2] + c) as isize - g.pad[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= it || hi >= ih || wi >= iw {
                                            continue;
                                        }
                                        acc += x[((ci * it + ti) * ih + hi) * iw + wi]
                                            * w[(((co * g.cin + ci) * kt + a) * kh + b) * kw + c];
                                    }
                                }
                            }
                        }
                        out[((co * ot + to) * oh + ho) * ow + wo] = acc;
                    }
                }
            }
        }
        out
    }

    fn geom(cin: usize, cout: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> ConvGeom {
        let output = [0, 1, 2].map(|i| conv_out_extent(input[i], kernel[i], stride[i], pad[i]).unwrap());
        ConvGeom { cin, cout, input, kernel, stride, pad, output }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let cases = [
            geom(2, 3, [4, 5, 6], [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            geom(2, 3, [4, 8, 8], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            geom(3, 2, [4, 8, 8], [3, 3, 3], [2, 2, 2], [1, 1, 1]),
            geom(2, 2, [5, 4, 4], [3, 1, 1], [1, 1, 1], [1, 0, 0]),
            geom(3, 4, [2, 3, 3], [1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ];
        for g in cases {
            let x = pseudo(g.cin * g.input.iter().product::<usize>(), 1);
            let w = pseudo(g.cout * g.cin * g.kvol(), 2);
            let fast = conv3d_forward(&x, &w, None, &g);
            let slow = conv_naive(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv^T(dy)> and likewise for the weights.
        let g = geom(2, 3, [4, 6, 5], [3, 3, 3], [2, 2, 1], [1, 1, 1]);
        let x = pseudo(g.cin * g.input.iter().product::<usize>(), 3);
        let w = pseudo(g.cout * g.cin * g.kvol(), 4);
        let dy = pseudo(g.cout * g.out_len(), 5);
        let y = conv3d_forward(&x, &w, None, &g);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv3d_backward(&x, &w, &dy, &g, Some(&mut dx), Some(&mut dw), None);
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(8, 1, 0, 1, 8), (1, 8));
        assert_eq!(valid_range(8, 1, 2, 1, 8), (0, 7));
        assert_eq!(valid_range(4, 2, 0, 1, 8), (1, 4));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let x = pseudo(12, 9);
        let mask = [true, false, true, true];
        let y = softmax_forward(&x, 4, Some(&mask));
        for row in y.chunks(4) {
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
