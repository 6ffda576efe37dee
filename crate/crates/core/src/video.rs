use alloc::format;

use crate::config::{SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crate::{Error, Real, Result, Tensor};

/// Pixel-space clip of shape (C, T, H, W) with values in [-1, 1].
/// A single frame (T = 1) is an image.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<F> {
    data: Tensor<F>,
}

const RANGE_SLACK: f64 = 1e-6;

impl<F: Real> VideoTensor<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("video must be rank 4 (C, T, H, W), got rank {}", s.len())));
        }
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        if !(c == 1 || c == 3) {
            return Err(Error::shape(format!("video must have 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::shape(format!("H and W must be divisible by {SPATIAL_FACTOR}, got {h}x{w}")));
        }
        if !(t == 1 || (t > 0 && t % TEMPORAL_FACTOR == 0)) {
            return Err(Error::shape(format!("T must be 1 or divisible by {TEMPORAL_FACTOR}, got {t}")));
        }
        let bound = F::from_f64(1.0 + RANGE_SLACK);
        if data.data().iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::invalid("video values must be finite and within [-1, 1]"));
        }
        Ok(VideoTensor { data })
    }

    /// Maps [0, 1] pixel values to the internal [-1, 1] range.
    pub fn from_unit(unit: Tensor<F>) -> Result<Self> {
        let two = F::from_f64(2.0);
        Self::new(unit.map(|v| v * two - F::one()))
    }

    /// Clamps to [-1, 1] and maps to [0, 1].
    pub fn to_unit(&self) -> Tensor<F> {
        let half = F::from_f64(0.5);
        self.data.map(|v| (v.max(-F::one()).min(F::one()) + F::one()) * half)
    }

    /// Clamps arbitrary decoder output into a valid clip.
    pub fn clamped(raw: &Tensor<F>) -> Result<Self> {
        Self::new(raw.map(|v| v.max(-F::one()).min(F::one())))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// Frame `t` as a single-frame clip.
    pub fn frame(&self, t: usize) -> Result<Self> {
        Ok(VideoTensor { data: self.data.narrow(1, t, 1)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rules() {
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[3, 16, 64, 64])).is_ok());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[3, 1, 64, 64])).is_ok());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[3, 6, 64, 64])).is_err());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[3, 4, 60, 64])).is_err());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[2, 4, 64, 64])).is_err());
        assert!(VideoTensor::new(Tensor::<f32>::full(&[1, 1, 8, 8], 1.5)).is_err());
    }

    #[test]
    fn unit_mapping_round_trip() {
        let unit = Tensor::<f32>::from_fn(&[1, 1, 8, 8], |i| i as f32 / 63.0);
        let v = VideoTensor::from_unit(unit.clone()).unwrap();
        assert!(v.to_unit().max_abs_diff(&unit) < 1e-6);
    }
}
