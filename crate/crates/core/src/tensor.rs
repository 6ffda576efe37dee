use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Real, Result};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(alloc::format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(alloc::format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(alloc::format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect() }
    }

    pub fn mean(&self) -> F {
        let s: F = self.data.iter().copied().sum();
        s / F::from_f64(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let rank = self.shape.len();
        assert_eq!(perm.len(), rank, "permutation rank mismatch");
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if self.data.is_empty() {
            return Tensor { shape: out_shape, data: out };
        }
        // Odometer over output indices; the innermost axis is copied in a tight loop.
        let inner = out_shape[rank - 1];
        let inner_stride = src_strides[rank - 1];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        loop {
            let mut off = base;
            for _ in 0..inner {
                out.push(self.data[off]);
                off += inner_stride;
            }
            // advance outer axes
            let mut axis = rank - 1;
            loop {
                if axis == 0 {
                    return Tensor { shape: out_shape, data: out };
                }
                axis -= 1;
                idx[axis] += 1;
                base += src_strides[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                base -= src_strides[axis] * out_shape[axis];
                idx[axis] = 0;
            }
        }
    }

    /// Slice `len` entries starting at `start` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        let d = *self.shape.get(dim).ok_or_else(|| Error::shape("narrow: dim out of range"))?;
        if start + len > d {
            return Err(Error::shape(alloc::format!("narrow {start}+{len} exceeds extent {d}")));
        }
        let outer: usize = self.shape[..dim].iter().product();
        let inner: usize = self.shape[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        Ok(Tensor { shape, data })
    }

    /// Concatenate along `dim`; every other extent must agree.
    pub fn concat(parts: &[&Tensor<F>], dim: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rank = first.rank();
        if dim >= rank {
            return Err(Error::shape("concat: dim out of range"));
        }
        let mut total = 0;
        for p in parts {
            if p.rank() != rank || (0..rank).any(|i| i != dim && p.shape[i] != first.shape[i]) {
                return Err(Error::shape(alloc::format!("concat {:?} with {:?}", first.shape, p.shape)));
            }
            total += p.shape[dim];
        }
        let outer: usize = first.shape[..dim].iter().product();
        let inner: usize = first.shape[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[dim] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[dim] = total;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
