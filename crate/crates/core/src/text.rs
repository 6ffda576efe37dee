//! Caption embeddings consumed by the cross-modal blocks.
//!
//! The default embedder is deliberately simple: each lowercase
//! whitespace-separated word maps to a fixed pseudo-random unit vector derived
//! from a hash of its bytes. Any other embedder only has to produce an
//! `L x D` matrix and a validity mask.

use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

pub const DEFAULT_MAX_TOKENS: usize = 77;

/// Token embeddings (L, D) plus a validity mask; masked rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor<f32>,
    pub mask: Vec<bool>,
    /// The caption was empty; models substitute their learned null token for row 0.
    pub null: bool,
}

impl TextEmbedding {
    pub fn new(tokens: Tensor<f32>, mask: Vec<bool>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] == 0 || s[0] != mask.len() {
            return Err(Error::shape("text embedding must be (L, D) with L >= 1 and one mask entry per row"));
        }
        let d = s[1];
        for (i, &keep) in mask.iter().enumerate() {
            if !keep && tokens.data()[i * d..(i + 1) * d].iter().any(|&v| v != 0.0) {
                return Err(Error::invalid("masked text rows must be zero"));
            }
        }
        Ok(TextEmbedding { tokens, mask, null: false })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Appends `extra` masked zero rows.
    pub fn padded(&self, extra: usize) -> Self {
        let d = self.dim();
        let mut data = self.tokens.data().to_vec();
        data.extend(core::iter::repeat_n(0.0, extra * d));
        let mut mask = self.mask.clone();
        mask.extend(core::iter::repeat_n(false, extra));
        TextEmbedding { tokens: Tensor::from_vec(&[self.len() + extra, d], data).expect("sized"), mask, null: self.null }
    }
}

/// Turns a caption into a [`TextEmbedding`].
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Result<TextEmbedding>;
}

/// Deterministic hash-based word embedder.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit vector for `word`; uses only IEEE-exact arithmetic (plus sqrt) so it
/// is identical on every platform.
pub fn word_vector(word: &str, dim: usize) -> Vec<f32> {
    let mut state = fnv1a(word.as_bytes()) ^ 0x5eed_0000_0000_0017;
    let raw: Vec<f64> = (0..dim).map(|_| (splitmix(&mut state) >> 11) as f64 / (1u64 << 52) as f64 - 1.0).collect();
    let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>()).max(f64::MIN_POSITIVE);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// Initial value of the learned null token.
pub fn null_vector(dim: usize) -> Vec<f32> {
    word_vector("\u{0}<null>", dim)
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let lower = caption.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().take(self.max_tokens).collect();
        if words.is_empty() {
            let tokens = Tensor::from_vec(&[1, self.dim], null_vector(self.dim))?;
            return Ok(TextEmbedding { tokens, mask: alloc::vec![true], null: true });
        }
        let mut data = Vec::with_capacity(words.len() * self.dim);
        for w in &words {
            data.extend(word_vector(w, self.dim));
        }
        let tokens = Tensor::from_vec(&[words.len(), self.dim], data)?;
        TextEmbedding::new(tokens, alloc::vec![true; words.len()])
    }
}

/// Default embedding of `caption` at width `dim`.
pub fn embed_text(caption: &str, dim: usize) -> Result<TextEmbedding> {
    HashEmbedder::new(dim).embed(caption)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_words_two_unit_rows() {
        let e = embed_text("red square", 32).unwrap();
        assert_eq!(e.tokens.shape(), &[2, 32]);
        for row in e.tokens.data().chunks(32) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(!e.null);
    }

    #[test]
    fn repeated_word_repeats_row_and_case_folds() {
        let e = embed_text("Red red", 16).unwrap();
        assert_eq!(e.tokens.data()[..16], e.tokens.data()[16..]);
        assert_ne!(embed_text("blue", 16).unwrap().tokens, embed_text("red", 16).unwrap().tokens);
    }

    #[test]
    fn empty_caption_is_single_null_token() {
        let e = embed_text("   ", 8).unwrap();
        assert_eq!(e.tokens.shape(), &[1, 8]);
        assert_eq!(e.mask, alloc::vec![true]);
        assert!(e.null);
    }

    #[test]
    fn long_captions_truncate() {
        let words: alloc::string::String = (0..100).map(|i| alloc::format!("w{i} ")).collect();
        assert_eq!(embed_text(&words, 4).unwrap().len(), DEFAULT_MAX_TOKENS);
    }

    #[test]
    fn padding_rows_must_be_zero() {
        let bad = TextEmbedding::new(Tensor::full(&[2, 2], 1.0), alloc::vec![true, false]);
        assert!(bad.is_err());
        let e = embed_text("a b", 4).unwrap().padded(3);
        assert_eq!(e.len(), 5);
        assert!(TextEmbedding::new(e.tokens.clone(), e.mask.clone()).is_ok());
    }
}
