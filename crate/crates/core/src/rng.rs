//! Seeded, resumable random source shared by initialization, latent sampling
//! and data generation.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{Real, Tensor};

/// Serializable position of a [`SeededRng`] stream.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (u128 does not survive JSON numbers).
    pub word_pos: alloc::string::String,
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from this one's seed and a label.
    pub fn fork(&self, label: u64) -> Self {
        Self::new(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, word_pos: alloc::format!("{}", self.inner.get_word_pos()) }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(pos);
        Some(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as i64
    }

    /// Standard normal via Box-Muller (one draw per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn normal_tensor<F: Real>(&mut self, shape: &[usize]) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::from_f64(self.normal()))
    }

    pub fn uniform_tensor<F: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::from_f64(self.uniform_range(-bound, bound)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = SeededRng::new(11);
        for _ in 0..7 {
            a.next_u64();
        }
        let mut b = SeededRng::from_state(&a.state()).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = SeededRng::new(3);
        let xs: alloc::vec::Vec<f64> = (0..20000).map(|_| r.normal()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.05, "{m} {v}");
    }
}
