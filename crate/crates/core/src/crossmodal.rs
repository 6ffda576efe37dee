//! Text conditioning: feature maps are cut into non-overlapping patches,
//! attend to the caption embedding, and the result is added back through a
//! zero-initialized projection convolution.

use alloc::format;
use alloc::vec::Vec;

use crate::config::CrossAttention;
use crate::graph::Var;
use crate::nn::{ChannelLayerNorm, Conv3d, Init, Linear};
use crate::params::{Builder, ParamId, Session};
use crate::text::TextEmbedding;
use crate::{Error, Real, Result, Tensor};

const PATCH_PERM: [usize; 6] = [1, 2, 4, 0, 3, 5];
const UNPATCH_PERM: [usize; 6] = [3, 0, 1, 4, 2, 5];

fn patch_dims(shape: &[usize], p: usize) -> Result<[usize; 6]> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("patchify expects (C, T, H, W), got {shape:?}")));
    }
    let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} feature map is not divisible into {p}x{p} patches")));
    }
    Ok([c, t, h / p, p, w / p, p])
}

/// (C, T, H, W) to tokens (T * H/p * W/p, C * p * p): frames in order,
/// patches row-major within a frame, each token laid out as (C, py, px).
pub fn patchify<F: Real>(fmap: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let d = patch_dims(fmap.shape(), p)?;
    let six = fmap.clone().reshape(&d)?;
    six.permute(&PATCH_PERM).reshape(&[d[1] * d[2] * d[4], d[0] * p * p])
}

/// Inverse of [`patchify`] for a map of shape `shape`.
pub fn unpatchify<F: Real>(tokens: &Tensor<F>, shape: &[usize], p: usize) -> Result<Tensor<F>> {
    let d = patch_dims(shape, p)?;
    let six = tokens.clone().reshape(&[d[1], d[2], d[4], d[0], p, p])?;
    six.permute(&UNPATCH_PERM).reshape(shape)
}

pub fn patchify_var<F: Real>(s: &mut Session<'_, F>, x: Var, p: usize) -> Result<Var> {
    let d = patch_dims(s.shape(x), p)?;
    let six = s.graph.reshape(x, &d)?;
    let perm = s.graph.permute(six, &PATCH_PERM)?;
    s.graph.reshape(perm, &[d[1] * d[2] * d[4], d[0] * p * p])
}

pub fn unpatchify_var<F: Real>(s: &mut Session<'_, F>, tokens: Var, shape: &[usize], p: usize) -> Result<Var> {
    let d = patch_dims(shape, p)?;
    let six = s.graph.reshape(tokens, &[d[1], d[2], d[4], d[0], p, p])?;
    let perm = s.graph.permute(six, &UNPATCH_PERM)?;
    s.graph.reshape(perm, shape)
}

/// Caption tokens as they enter a forward pass.
#[derive(Clone, Debug)]
pub struct TextCond {
    /// (L, D) embedding rows.
    pub tokens: Var,
    pub mask: Vec<bool>,
}

impl TextCond {
    /// Loads an embedding into the session; an empty caption uses the learned
    /// null token `null` in place of its placeholder row.
    pub fn load<F: Real>(s: &mut Session<'_, F>, text: &TextEmbedding, null: Option<ParamId>, dim: usize) -> Result<Self> {
        if text.dim() != dim {
            return Err(Error::shape(format!("text embedding width {} does not match text_embed_dim {dim}", text.dim())));
        }
        if !text.mask.iter().any(|&m| m) {
            return Err(Error::invalid("text embedding has no valid tokens"));
        }
        let tokens = match (text.null, null) {
            (true, Some(id)) => s.p(id),
            _ => s.constant(text.tokens.cast()),
        };
        Ok(TextCond { tokens, mask: text.mask.clone() })
    }
}

/// Single-head attention between visual tokens and caption tokens.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    pub variant: CrossAttention,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    /// Text values (standard) or visual values (gated).
    pub v: Linear,
    /// Gated variant: maps attended keys to a per-token gate.
    pub gate: Option<Linear>,
    pub out: Linear,
}

impl CrossAttentionLayer {
    pub fn new<F: Real>(
        b: &mut Builder<'_, F>,
        visual_dim: usize,
        text_dim: usize,
        dim: usize,
        variant: CrossAttention,
    ) -> Result<Self> {
        let q = Linear::new(&mut b.push("q"), visual_dim, dim, true, Init::FanIn)?;
        let k = Linear::new(&mut b.push("k"), text_dim, dim, true, Init::FanIn)?;
        let (v, gate) = match variant {
            CrossAttention::Standard => (Linear::new(&mut b.push("v"), text_dim, dim, true, Init::FanIn)?, None),
            CrossAttention::Gated => (
                Linear::new(&mut b.push("v"), visual_dim, dim, true, Init::FanIn)?,
                Some(Linear::new(&mut b.push("gate"), dim, dim, false, Init::FanIn)?),
            ),
        };
        let out = Linear::new(&mut b.push("out"), dim, visual_dim, true, Init::FanIn)?;
        Ok(CrossAttentionLayer { variant, dim, q, k, v, gate, out })
    }

    /// Returns the attended tokens (Nv, d) and the attention weights (Nv, L).
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, visual: Var, text: &TextCond) -> Result<(Var, Var)> {
        let q = self.q.forward(s, visual)?;
        let k = self.k.forward(s, text.tokens)?;
        let scores = s.graph.matmul(q, k, false, true)?;
        let scores = s.graph.scale(scores, F::one() / F::from_f64(self.dim as f64).sqrt());
        let attn = s.graph.softmax(scores, Some(&text.mask))?;
        let mixed = match self.variant {
            CrossAttention::Standard => {
                let v = self.v.forward(s, text.tokens)?;
                s.graph.matmul(attn, v, false, false)?
            }
            CrossAttention::Gated => {
                let gate = self.gate.as_ref().expect("gated layer has a gate");
                let kg = gate.forward(s, k)?;
                let g = s.graph.matmul(attn, kg, false, false)?;
                let v = self.v.forward(s, visual)?;
                s.graph.mul(g, v)?
            }
        };
        Ok((self.out.forward(s, mixed)?, attn))
    }
}

/// LayerNorm, patchify, cross-attention, unpatchify, projection conv, residual add.
#[derive(Clone, Debug)]
pub struct CrossModalBlock {
    pub norm: ChannelLayerNorm,
    pub attn: CrossAttentionLayer,
    pub proj: Conv3d,
    pub patch: usize,
    pub channels: usize,
}

impl CrossModalBlock {
    pub fn new<F: Real>(
        b: &mut Builder<'_, F>,
        channels: usize,
        patch: usize,
        text_dim: usize,
        attn_dim: usize,
        variant: CrossAttention,
    ) -> Result<Self> {
        let norm = ChannelLayerNorm::new(&mut b.push("norm"), channels)?;
        let attn = CrossAttentionLayer::new(&mut b.push("attn"), channels * patch * patch, text_dim, attn_dim, variant)?;
        let proj = Conv3d::same(&mut b.push("proj"), channels, channels, [1, 1, 1], Init::Zero)?;
        Ok(CrossModalBlock { norm, attn, proj, patch, channels })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: &TextCond) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        if shape.first() != Some(&self.channels) {
            return Err(Error::shape(format!("cross-modal block expects {} channels, got {shape:?}", self.channels)));
        }
        let h = self.norm.forward(s, x)?;
        let tokens = patchify_var(s, h, self.patch)?;
        let (attended, _) = self.attn.forward(s, tokens, text)?;
        let back = unpatchify_var(s, attended, &shape, self.patch)?;
        let proj = self.proj.forward(s, back)?;
        s.graph.add(x, proj)
    }
}
