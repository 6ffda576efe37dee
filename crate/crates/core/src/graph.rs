//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so every parent index is smaller than its child's and
//! the backward sweep is a single reverse walk.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, conv_out_extent, ConvGeom, NormStats};
use crate::params::ParamId;
use crate::real::{gemm, Mat};
use crate::tensor::{inverse_permutation, numel};
use crate::{Error, Real, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Stride and zero padding of a 3D convolution, per (T, H, W) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    /// Stride 1 with symmetric padding that preserves every extent.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvSpec { stride: [1, 1, 1], pad: kernel.map(|k| k / 2) }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary<F> {
    Silu,
    Relu,
    LeakyRelu(F),
    Abs,
    Exp,
    Sqrt,
    Square,
    Clamp(F, F),
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Shift(Var),
    Unary(Var, Unary<F>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, dim: usize, start: usize },
    Concat { parts: Vec<Var>, dim: usize },
    BiasChannels(Var, Var),
    BiasLast(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample(Var, [usize; 3]),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats<F> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Parameters loaded as trainable leaves, in load order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Shift(a), ng)
    }

    fn unary(&mut self, a: Var, u: Unary<F>) -> Var {
        let f = |x: F| -> F {
            match u {
                Unary::Silu => x / (F::one() + (-x).exp()),
                Unary::Relu => x.max(F::zero()),
                Unary::LeakyRelu(s) => {
                    if x > F::zero() {
                        x
                    } else {
                        x * s
                    }
                }
                Unary::Abs => x.abs(),
                Unary::Exp => x.exp(),
                Unary::Sqrt => x.sqrt(),
                Unary::Square => x * x,
                Unary::Clamp(lo, hi) => x.max(lo).min(hi),
            }
        };
        let v = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(v, Op::Unary(a, u), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let v = self.value(a).permute(perm);
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), ng))
    }

    pub fn narrow(&mut self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(dim, start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Narrow { x: a, dim, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let v = {
            let ts: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&ts, dim)?
        };
        let ng = self.ng(parts);
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), dim }, ng))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(Error::shape(format!("channel bias {:?} for {:?}", self.shape(b), self.shape(x))));
        }
        let mut v = self.value(x).clone();
        let inner = v.numel() / c;
        let bv = self.value(b).data().to_vec();
        for (ci, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|e| *e += bv[ci]);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::BiasChannels(x, b), ng))
    }

    /// `x[..., j] + b[j]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("row bias on scalar"))?;
        if self.shape(b) != [d] {
            return Err(Error::shape(format!("row bias {:?} for {:?}", self.shape(b), self.shape(x))));
        }
        let mut v = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for chunk in v.data_mut().chunks_mut(d) {
            chunk.iter_mut().zip(&bv).for_each(|(e, &bb)| *e += bb);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::BiasLast(x, b), ng))
    }

    /// Matrix product of rank-2 operands, or batched over a shared leading
    /// axis for rank-3 operands. `ta`/`tb` transpose the trailing two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb, ta, tb)?;
        let MatDims { batch, m, k, n } = dims;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let am = op_view(&av[bi * m * k..(bi + 1) * m * k], m, k, ta);
                let bm = op_view(&bv[bi * k * n..(bi + 1) * k * n], k, n, tb);
                gemm(m, k, n, F::one(), am, bm, F::zero(), &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let shape: Vec<usize> = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// Softmax over the last axis. With `mask`, masked-out columns receive
    /// probability exactly zero; at least one column must be kept.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape(format!("softmax mask length {} for {cols} columns", m.len())));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::invalid("softmax mask excludes every column"));
            }
        }
        let y = kernels::softmax_forward(self.value(x).data(), cols, mask);
        let v = Tensor::from_vec(self.shape(x), y)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Softmax { x }, ng))
    }

    /// 3D convolution of a (C_in, T, H, W) input with (C_out, C_in, kt, kh, kw) weights.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::shape(format!("conv3d expects rank-4 input and rank-5 kernel, got {xs:?} and {ws:?}")));
        }
        if xs[0] != ws[1] {
            return Err(Error::shape(format!("conv3d: input has {} channels, kernel expects {}", xs[0], ws[1])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv3d bias length must equal output channels"));
            }
        }
        let kernel = [ws[2], ws[3], ws[4]];
        let input = [xs[1], xs[2], xs[3]];
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = conv_out_extent(input[i], kernel[i], spec.stride[i], spec.pad[i])
                .ok_or_else(|| Error::shape(format!("conv3d: extent {} too small for kernel {}", input[i], kernel[i])))?;
        }
        let geom = ConvGeom { cin: xs[0], cout: ws[0], input, kernel, stride: spec.stride, pad: spec.pad, output };
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::from_vec(&[ws[0], output[0], output[1], output[2]], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(v, Op::Conv { x, w, b, geom }, ng))
    }

    /// Nearest-neighbour upsampling of a (C, T, H, W) tensor.
    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factors.contains(&0) {
            return Err(Error::shape("upsample expects rank-4 input and positive factors"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), &s, factors);
        let v = Tensor::from_vec(&[s[0], s[1] * factors[0], s[2] * factors[1], s[3] * factors[2]], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Upsample(x, factors), ng))
    }

    /// Group normalization of a (C, ...) tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: F) -> Result<Var> {
        let c = self.shape(x)[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group norm affine parameters must have one entry per channel"));
        }
        let (y, stats) =
            kernels::group_norm_forward(self.value(x).data(), c, groups, self.value(gamma).data(), self.value(beta).data(), eps);
        let v = Tensor::from_vec(self.shape(x), y)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(v, Op::GroupNorm { x, gamma, beta, groups, stats }, ng))
    }

    /// Layer normalization across channels, independently at every position of a (C, ...) tensor.
    pub fn channel_layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer norm affine parameters must have one entry per channel"));
        }
        let (y, stats) =
            kernels::channel_norm_forward(self.value(x).data(), c, self.value(gamma).data(), self.value(beta).data(), eps);
        let v = Tensor::from_vec(self.shape(x), y)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(v, Op::ChannelNorm { x, gamma, beta, stats }, ng))
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Grads { grads, params: self.params.clone() });
        }
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Grads { grads, params: self.params.clone() })
    }

    fn propagate(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        // Accumulator for parent `v`, or None when it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, F::one()), (*b, F::one())] {
                    if let Some(g) = acc!(v) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, F::one()), (*b, -F::one())] {
                    if let Some(g) = acc!(v) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = acc!(*a) {
                    let bv = val(*b);
                    g.iter_mut().zip(dy).zip(bv).for_each(|((g, &d), &o)| *g += d * o);
                }
                if let Some(g) = acc!(*b) {
                    let av = val(*a);
                    g.iter_mut().zip(dy).zip(av).for_each(|((g, &d), &o)| *g += d * o);
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *s);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Unary(a, u) => {
                let x = val(*a);
                let y = node.value.data();
                if let Some(g) = acc!(*a) {
                    for j in 0..g.len() {
                        let xj = x[j];
                        let dfdx = match *u {
                            Unary::Silu => {
                                let s = F::one() / (F::one() + (-xj).exp());
                                s * (F::one() + xj * (F::one() - s))
                            }
                            Unary::Relu => {
                                if xj > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xj > F::zero() {
                                    F::one()
                                } else {
                                    s
                                }
                            }
                            Unary::Abs => {
                                if xj > F::zero() {
                                    F::one()
                                } else if xj < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Exp => y[j],
                            Unary::Sqrt => F::from_f64(0.5) / y[j],
                            Unary::Square => F::from_f64(2.0) * xj,
                            Unary::Clamp(lo, hi) => {
                                if xj >= lo && xj <= hi {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                        };
                        g[j] += dy[j] * dfdx;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(g) = acc!(*a) {
                    let d = dy[0] / F::from_f64(g.len() as f64);
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(g) = acc!(*a) {
                    let back = Tensor::from_vec(node.value.shape(), dy.to_vec())
                        .expect("gradient matches value shape")
                        .permute(&inverse_permutation(perm));
                    g.iter_mut().zip(back.data()).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Narrow { x, dim, start } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                if let Some(g) = acc!(*x) {
                    let outer: usize = xs[..*dim].iter().product();
                    let inner: usize = xs[dim + 1..].iter().product();
                    let len = node.value.shape()[*dim];
                    for o in 0..outer {
                        let dst = (o * xs[*dim] + start) * inner;
                        let src = o * len * inner;
                        g[dst..dst + len * inner].iter_mut().zip(&dy[src..src + len * inner]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Concat { parts, dim } => {
                let s = node.value.shape();
                let outer: usize = s[..*dim].iter().product();
                let inner: usize = s[dim + 1..].iter().product();
                let total = s[*dim];
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*dim];
                    if let Some(g) = acc!(p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            g[dst..dst + len * inner].iter_mut().zip(&dy[src..src + len * inner]).for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += len;
                }
            }
            Op::BiasChannels(x, b) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = acc!(*b) {
                    let inner = dy.len() / g.len();
                    for (c, chunk) in dy.chunks(inner).enumerate() {
                        g[c] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::BiasLast(x, b) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = acc!(*b) {
                    let d = g.len();
                    for chunk in dy.chunks(d) {
                        g.iter_mut().zip(chunk).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let MatDims { batch, m, k, n } = matmul_dims(sa, sb, *ta, *tb).expect("validated in forward");
                let (av, bv) = (val(*a), val(*b));
                if let Some(g) = acc!(*a) {
                    for bi in 0..batch {
                        let dc = Mat::row_major(&dy[bi * m * n..(bi + 1) * m * n], n);
                        let bop = op_view(&bv[bi * k * n..(bi + 1) * k * n], k, n, *tb);
                        let ga = &mut g[bi * m * k..(bi + 1) * m * k];
                        if !*ta {
                            gemm(m, n, k, F::one(), dc, transpose(bop), F::one(), ga);
                        } else {
                            gemm(k, n, m, F::one(), bop, transpose(dc), F::one(), ga);
                        }
                    }
                }
                if let Some(g) = acc!(*b) {
                    for bi in 0..batch {
                        let dc = Mat::row_major(&dy[bi * m * n..(bi + 1) * m * n], n);
                        let aop = op_view(&av[bi * m * k..(bi + 1) * m * k], m, k, *ta);
                        let gb = &mut g[bi * k * n..(bi + 1) * k * n];
                        if !*tb {
                            gemm(k, m, n, F::one(), transpose(aop), dc, F::one(), gb);
                        } else {
                            gemm(n, m, k, F::one(), transpose(dc), aop, F::one(), gb);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(g) = acc!(*x) {
                    let cols = *node.value.shape().last().expect("rank >= 1");
                    kernels::softmax_backward(node.value.data(), dy, cols, g);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                // Disjoint nodes: take the parent buffers out so three can be borrowed at once.
                let take = |v: Var, grads: &mut [Option<Vec<F>>]| -> Option<Vec<F>> {
                    if self.nodes[v.0].needs_grad {
                        Some(grads[v.0].take().unwrap_or_else(|| vec![F::zero(); self.nodes[v.0].value.numel()]))
                    } else {
                        None
                    }
                };
                let mut gx = take(*x, grads);
                let mut gw = take(*w, grads);
                let mut gb = b.and_then(|b| take(b, grads));
                kernels::conv3d_backward(xv, wv, dy, geom, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    grads[b.0] = Some(g);
                }
            }
            Op::Upsample(x, f) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                if let Some(g) = acc!(*x) {
                    kernels::upsample_backward(dy, &xs, *f, g);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let c = self.nodes[x.0].value.shape()[0];
                let (xv, gv) = (val(*x), val(*gamma));
                let mut gx = self.nodes[x.0].needs_grad.then(|| grads[x.0].take().unwrap_or_else(|| vec![F::zero(); xv.len()]));
                let mut gg = self.nodes[gamma.0].needs_grad.then(|| grads[gamma.0].take().unwrap_or_else(|| vec![F::zero(); c]));
                let mut gbeta = self.nodes[beta.0].needs_grad.then(|| grads[beta.0].take().unwrap_or_else(|| vec![F::zero(); c]));
                kernels::group_norm_backward(
                    xv,
                    dy,
                    c,
                    *groups,
                    gv,
                    stats,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gbeta.as_deref_mut(),
                );
                restore(grads, *x, gx);
                restore(grads, *gamma, gg);
                restore(grads, *beta, gbeta);
            }
            Op::ChannelNorm { x, gamma, beta, stats } => {
                let c = self.nodes[x.0].value.shape()[0];
                let (xv, gv) = (val(*x), val(*gamma));
                let mut gx = self.nodes[x.0].needs_grad.then(|| grads[x.0].take().unwrap_or_else(|| vec![F::zero(); xv.len()]));
                let mut gg = self.nodes[gamma.0].needs_grad.then(|| grads[gamma.0].take().unwrap_or_else(|| vec![F::zero(); c]));
                let mut gbeta = self.nodes[beta.0].needs_grad.then(|| grads[beta.0].take().unwrap_or_else(|| vec![F::zero(); c]));
                kernels::channel_norm_backward(xv, dy, c, gv, stats, gx.as_deref_mut(), gg.as_deref_mut(), gbeta.as_deref_mut());
                restore(grads, *x, gx);
                restore(grads, *gamma, gg);
                restore(grads, *beta, gbeta);
            }
        }
    }
}

fn restore<F>(grads: &mut [Option<Vec<F>>], v: Var, g: Option<Vec<F>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<MatDims> {
    let bad = || Error::shape(format!("matmul {sa:?} x {sb:?} (ta={ta}, tb={tb})"));
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return Err(bad());
    }
    let batch = if sa.len() == 3 {
        if sa[0] != sb[0] {
            return Err(bad());
        }
        sa[0]
    } else {
        1
    };
    let r = sa.len();
    let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
    let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    if k != k2 {
        return Err(bad());
    }
    Ok(MatDims { batch, m, k, n })
}

/// View of `op(X)` with logical shape rows x cols, where X is stored row-major.
fn op_view<F>(data: &[F], rows: usize, cols: usize, transposed: bool) -> Mat<'_, F> {
    if transposed {
        Mat::transposed(data, rows)
    } else {
        Mat::row_major(data, cols)
    }
}

fn transpose<F>(m: Mat<'_, F>) -> Mat<'_, F> {
    Mat { data: m.data, rs: m.cs, cs: m.rs }
}

/// Result of [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for every trainable leaf. Parameters that were loaded but do
    /// not influence the root get an all-zero gradient.
    pub fn param_grads<'a>(&'a self, graph: &'a Graph<F>) -> impl Iterator<Item = (ParamId, Tensor<F>)> + 'a {
        self.params.iter().map(move |&(id, v)| {
            let shape = graph.shape(v);
            let data = self.grads[v.0].clone().unwrap_or_else(|| vec![F::zero(); numel(shape)]);
            (id, Tensor::from_vec(shape, data).expect("gradient matches parameter shape"))
        })
    }
}
