//! Layer primitives shared by every network in the crate.

use alloc::vec::Vec;

use crate::graph::{ConvSpec, Var};
use crate::params::{Builder, ParamId, Session};
use crate::{Error, Real, Result, Tensor};

pub const NORM_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

/// Group count for a normalization over `channels`: 32, or the largest divisor below it.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in +-1/sqrt(fan_in).
    FanIn,
    Zero,
}

/// Plain (non-graph) 3D kernel: weights (C_out, C_in, kt, kh, kw), bias, padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dKernel<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub pad: [usize; 3],
}

/// Inserts a singleton temporal axis into a 2D kernel (C_out, C_in, kh, kw).
/// On a clip whose frames are identical the result computes exactly the 2D
/// convolution of each frame.
pub fn inflate_2d_to_3d<F: Real>(kernel2d: &Tensor<F>, bias: &Tensor<F>) -> Result<Conv3dKernel<F>> {
    let s = kernel2d.shape();
    if s.len() != 4 {
        return Err(Error::shape("2D kernel must be (C_out, C_in, kh, kw)"));
    }
    if s[2] % 2 == 0 || s[3] % 2 == 0 {
        return Err(Error::shape("inflation requires odd spatial kernel extents"));
    }
    if bias.shape() != [s[0]] {
        return Err(Error::shape("bias length must equal C_out"));
    }
    let weight = kernel2d.clone().reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    Ok(Conv3dKernel { weight, bias: bias.clone(), pad: [0, s[2] / 2, s[3] / 2] })
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3d {
    pub fn new<F: Real>(
        b: &mut Builder<'_, F>,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let fan_in = (cin * kernel.iter().product::<usize>()) as f64;
        let bound = 1.0 / libm::sqrt(fan_in);
        let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
        let (weight, bias) = match init {
            Init::FanIn => (b.uniform("weight", &shape, bound)?, b.uniform("bias", &[cout], bound)?),
            Init::Zero => (b.zeros("weight", &shape)?, b.zeros("bias", &[cout])?),
        };
        Ok(Conv3d { weight, bias, kernel, spec, cin, cout })
    }

    /// Stride-1 "same" convolution.
    pub fn same<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, kernel: [usize; 3], init: Init) -> Result<Self> {
        Self::new(b, cin, cout, kernel, ConvSpec::same(kernel), init)
    }

    /// A (1, kh, kw) convolution whose weights come from inflating a freshly
    /// initialized 2D kernel.
    pub fn inflated<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, k: usize, stride_hw: usize) -> Result<Self> {
        Self::inflated_deep(b, cin, cout, k, 1, [1, stride_hw, stride_hw])
    }

    /// A (kt, kh, kw) convolution holding an inflated 2D kernel in its central
    /// temporal slice and zeros elsewhere; on a static clip it computes the 2D
    /// convolution of every frame it samples.
    pub fn inflated_deep<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, k: usize, kt: usize, stride: [usize; 3]) -> Result<Self> {
        if kt % 2 == 0 {
            return Err(Error::shape("inflation requires an odd temporal extent"));
        }
        let bound = 1.0 / libm::sqrt((cin * k * k) as f64);
        let k2: Tensor<F> = b.rng().uniform_tensor(&[cout, cin, k, k], bound);
        let bias: Tensor<F> = b.rng().uniform_tensor(&[cout], bound);
        let k3 = inflate_2d_to_3d(&k2, &bias)?;
        let plane = k * k;
        let deep = Tensor::from_fn(&[cout, cin, kt, k, k], |i| {
            let (outer, t, r) = (i / (kt * plane), (i / plane) % kt, i % plane);
            if t == kt / 2 {
                k3.weight.data()[outer * plane + r]
            } else {
                F::zero()
            }
        });
        let weight = b.param("weight", deep)?;
        let bias = b.param("bias", k3.bias)?;
        Ok(Conv3d { weight, bias, kernel: [kt, k, k], spec: ConvSpec { stride, pad: [kt / 2, k3.pad[1], k3.pad[2]] }, cin, cout })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let (w, bias) = (s.p(self.weight), s.p(self.bias));
        s.graph.conv3d(x, w, Some(bias), self.spec)
    }

    /// Frame-wise reinterpretation: only the central temporal slice of the
    /// kernel is used, with temporal stride 1 and no temporal padding.
    pub fn forward_framewise<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        if self.kernel[0] == 1 && self.spec.stride[0] == 1 && self.spec.pad[0] == 0 {
            return self.forward(s, x);
        }
        let (w, bias) = (s.p(self.weight), s.p(self.bias));
        let w = s.graph.narrow(w, 2, self.kernel[0] / 2, 1)?;
        let spec = ConvSpec { stride: [1, self.spec.stride[1], self.spec.stride[2]], pad: [0, self.spec.pad[1], self.spec.pad[2]] };
        s.graph.conv3d(x, w, Some(bias), spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, channels: usize) -> Result<Self> {
        Ok(GroupNorm { gamma: b.ones("gamma", &[channels])?, beta: b.zeros("beta", &[channels])?, groups: norm_groups(channels) })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.graph.group_norm(x, g, b, self.groups, F::from_f64(NORM_EPS))
    }
}

/// Layer normalization across channels at each position of a (C, ...) map.
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelLayerNorm {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, channels: usize) -> Result<Self> {
        Ok(ChannelLayerNorm { gamma: b.ones("gamma", &[channels])?, beta: b.zeros("beta", &[channels])? })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.graph.channel_layer_norm(x, g, b, F::from_f64(LN_EPS))
    }
}

/// Dense map with weight stored (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Linear {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, dim_in: usize, dim_out: usize, bias: bool, init: Init) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(dim_in as f64);
        let weight = match init {
            Init::FanIn => b.uniform("weight", &[dim_in, dim_out], bound)?,
            Init::Zero => b.zeros("weight", &[dim_in, dim_out])?,
        };
        let bias = if bias {
            Some(match init {
                Init::FanIn => b.uniform("bias", &[dim_out], bound)?,
                Init::Zero => b.zeros("bias", &[dim_out])?,
            })
        } else {
            None
        };
        Ok(Linear { weight, bias, dim_in, dim_out })
    }

    /// Rows of `x` (N, in) to (N, out).
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let y = s.graph.matmul(x, w, false, false)?;
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.graph.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Channel-major input (in, N) to channel-major output (out, N).
    pub fn forward_channels<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let y = s.graph.matmul(w, x, true, false)?;
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.graph.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Applies the map along the last axis of a tensor of any rank >= 2.
    pub fn forward_last<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let shape: Vec<usize> = s.shape(x).to_vec();
        let rows = shape.iter().product::<usize>() / self.dim_in;
        let flat = s.graph.reshape(x, &[rows, self.dim_in])?;
        let y = self.forward(s, flat)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 2") = self.dim_out;
        s.graph.reshape(y, &out_shape)
    }
}

/// Total scalar count of the listed parameters.
pub fn count_params<F: Real>(store: &crate::params::ParamStore<F>, ids: impl IntoIterator<Item = ParamId>) -> usize {
    ids.into_iter().map(|id| store.value(id).numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::SeededRng;

    /// Direct 2D "same" convolution of one (C, H, W) frame.
    fn conv2d_oracle(x: &[f64], cin: usize, h: usize, w: usize, k: &Tensor<f64>, bias: &[f64]) -> alloc::vec::Vec<f64> {
        let s = k.shape();
        let (cout, kh, kw) = (s[0], s[2], s[3]);
        let mut out = alloc::vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let (yi, xi) = (y as isize + a as isize - (kh / 2) as isize, xx as isize + bb as isize - (kw / 2) as isize);
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + yi as usize) * w + xi as usize] * k.data()[((co * cin + ci) * kh + a) * kw + bb];
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    fn run_inflated(k3: &Conv3dKernel<f64>, video: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(video);
        let w = g.constant(k3.weight.clone());
        let b = g.constant(k3.bias.clone());
        let y = g.conv3d(x, w, Some(b), ConvSpec { stride: [1, 1, 1], pad: k3.pad }).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn inflated_identity_is_per_frame_identity() {
        let k = Tensor::from_vec(&[2, 2, 1, 1], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k3 = inflate_2d_to_3d(&k, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(k3.weight.shape(), &[2, 2, 1, 1, 1]);
        let mut rng = SeededRng::new(1);
        let v: Tensor<f64> = rng.normal_tensor(&[2, 4, 5, 5]);
        assert_eq!(run_inflated(&k3, v.clone()), v);
    }

    #[test]
    fn inflated_conv_equals_2d_conv_on_every_frame() {
        let mut rng = SeededRng::new(2);
        let (cin, cout, t, h, w) = (3, 4, 4, 7, 6);
        let k: Tensor<f64> = rng.normal_tensor(&[cout, cin, 3, 3]);
        let bias: Tensor<f64> = rng.normal_tensor(&[cout]);
        let k3 = inflate_2d_to_3d(&k, &bias).unwrap();
        assert_eq!(k3.weight.data(), k.data());
        // Random frames: output frame i depends on input frame i only.
        let v: Tensor<f64> = rng.normal_tensor(&[cin, t, h, w]);
        let out = run_inflated(&k3, v.clone());
        for i in 0..t {
            let frame = v.narrow(1, i, 1).unwrap();
            let oracle = conv2d_oracle(frame.data(), cin, h, w, &k, bias.data());
            let got = out.narrow(1, i, 1).unwrap();
            for (a, b) in got.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Static clip: every output frame equals the 2D convolution of the shared frame.
        let f: Tensor<f64> = rng.normal_tensor(&[cin, 1, h, w]);
        let stat = Tensor::concat(&[&f, &f, &f, &f], 1).unwrap();
        let out = run_inflated(&k3, stat);
        let oracle = conv2d_oracle(f.data(), cin, h, w, &k, bias.data());
        for i in 0..4 {
            let got = out.narrow(1, i, 1).unwrap();
            assert!(got.data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn inflation_rejects_even_kernels() {
        assert!(inflate_2d_to_3d(&Tensor::<f32>::zeros(&[1, 1, 2, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(64), 32);
        assert_eq!(norm_groups(16), 16);
        assert_eq!(norm_groups(48), 24);
        assert_eq!(norm_groups(4), 4);
    }
}
