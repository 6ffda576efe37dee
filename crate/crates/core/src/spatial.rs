//! First stage: the temporal-aware spatial autoencoder (E1, D1).
//!
//! Frames are compressed 8x spatially by inflated (1, 3, 3) convolutions
//! arranged in four resolution levels. Each block carries an additional
//! temporal convolution; the middle block adds full 3D self-attention and a
//! per-site temporal attention. In the simultaneous variant the same network
//! also halves the frame axis twice.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{ModelConfig, Placement, Variant, LEVELS, SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crate::crossmodal::{CrossModalBlock, TextCond};
use crate::graph::Var;
use crate::nn::{Conv3d, GroupNorm, Init, Linear};
use crate::params::{Builder, Session};
use crate::rng::SeededRng;
use crate::{Error, Real, Result};

/// Per-pass switches shared by every block in a stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pass<'a> {
    pub text: Option<&'a TextCond>,
    /// Temporal convolutions and temporal attention act as identity; strided
    /// spatiotemporal convolutions use their central temporal slice.
    pub image: bool,
}

/// Spatial (1, 3, 3) convolution followed by a residual temporal convolution.
#[derive(Clone, Debug)]
pub struct STBlock3D {
    pub norm1: GroupNorm,
    pub spatial_conv: Conv3d,
    pub norm2: Option<GroupNorm>,
    /// Zero-initialized, so a fresh block computes its 2D path exactly.
    pub temporal_conv: Option<Conv3d>,
    pub shortcut: Option<Conv3d>,
    pub cin: usize,
    pub cout: usize,
}

impl STBlock3D {
    /// `temporal_kernel = None` builds the block without a temporal branch.
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, temporal_kernel: Option<[usize; 3]>) -> Result<Self> {
        let norm1 = GroupNorm::new(&mut b.push("norm1"), cin)?;
        let spatial_conv = Conv3d::inflated(&mut b.push("spatial_conv"), cin, cout, 3, 1)?;
        let (norm2, temporal_conv) = match temporal_kernel {
            Some(k) => {
                let mut t = b.temporal();
                let norm2 = GroupNorm::new(&mut t.push("norm2"), cout)?;
                let conv = Conv3d::same(&mut t.push("temporal_conv"), cout, cout, k, Init::Zero)?;
                (Some(norm2), Some(conv))
            }
            None => (None, None),
        };
        let shortcut = if cin != cout { Some(Conv3d::same(&mut b.push("shortcut"), cin, cout, [1, 1, 1], Init::FanIn)?) } else { None };
        Ok(STBlock3D { norm1, spatial_conv, norm2, temporal_conv, shortcut, cin, cout })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, image: bool) -> Result<Var> {
        let c = s.shape(x)[0];
        if c != self.cin {
            return Err(Error::shape(format!("block expects {} channels, got {c}", self.cin)));
        }
        let h = self.norm1.forward(s, x)?;
        let h = s.graph.silu(h);
        let mut h = self.spatial_conv.forward(s, h)?;
        if let (Some(norm2), Some(tconv), false) = (&self.norm2, &self.temporal_conv, image) {
            let t = norm2.forward(s, h)?;
            let t = s.graph.silu(t);
            let t = tconv.forward(s, t)?;
            h = s.graph.add(h, t)?;
        }
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        s.graph.add(skip, h)
    }
}

/// Single-head self-attention over every (t, y, x) position of a feature map.
#[derive(Clone, Debug)]
pub struct Attention3D {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl Attention3D {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, c: usize, proj_init: Init) -> Result<Self> {
        Ok(Attention3D {
            norm: GroupNorm::new(&mut b.push("norm"), c)?,
            q: Linear::new(&mut b.push("q"), c, c, true, Init::FanIn)?,
            k: Linear::new(&mut b.push("k"), c, c, true, Init::FanIn)?,
            v: Linear::new(&mut b.push("v"), c, c, true, Init::FanIn)?,
            proj: Linear::new(&mut b.push("proj"), c, c, true, proj_init)?,
        })
    }

    /// Returns the output map and the (N, N) attention weights.
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<(Var, Var)> {
        let shape = s.shape(x).to_vec();
        let (c, n) = (shape[0], shape[1..].iter().product::<usize>());
        let h = self.norm.forward(s, x)?;
        let h = s.graph.reshape(h, &[c, n])?;
        let q = self.q.forward_channels(s, h)?;
        let k = self.k.forward_channels(s, h)?;
        let v = self.v.forward_channels(s, h)?;
        let scores = s.graph.matmul(q, k, true, false)?;
        let scores = s.graph.scale(scores, F::one() / F::from_f64(c as f64).sqrt());
        let attn = s.graph.softmax(scores, None)?;
        let o = s.graph.matmul(v, attn, false, true)?;
        let o = self.proj.forward_channels(s, o)?;
        let o = s.graph.reshape(o, &shape)?;
        Ok((s.graph.add(x, o)?, attn))
    }
}

/// Self-attention along the frame axis, independently at every spatial site.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Zero-initialized output projection.
    pub proj: Linear,
}

impl TemporalAttention {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, c: usize) -> Result<Self> {
        Ok(TemporalAttention {
            norm: GroupNorm::new(&mut b.push("norm"), c)?,
            q: Linear::new(&mut b.push("q"), c, c, true, Init::FanIn)?,
            k: Linear::new(&mut b.push("k"), c, c, true, Init::FanIn)?,
            v: Linear::new(&mut b.push("v"), c, c, true, Init::FanIn)?,
            proj: Linear::new(&mut b.push("proj"), c, c, true, Init::Zero)?,
        })
    }

    /// Returns the output map and the (sites, T, T) attention weights.
    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<(Var, Var)> {
        let shape = s.shape(x).to_vec();
        let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = self.norm.forward(s, x)?;
        // (C, T, h, w) -> (h, w, T, C) -> (sites, T, C)
        let seq = s.graph.permute(n, &[2, 3, 1, 0])?;
        let seq = s.graph.reshape(seq, &[h * w, t, c])?;
        let q = self.q.forward_last(s, seq)?;
        let k = self.k.forward_last(s, seq)?;
        let v = self.v.forward_last(s, seq)?;
        let scores = s.graph.matmul(q, k, false, true)?;
        let scores = s.graph.scale(scores, F::one() / F::from_f64(c as f64).sqrt());
        let attn = s.graph.softmax(scores, None)?;
        let o = s.graph.matmul(attn, v, false, false)?;
        let o = self.proj.forward_last(s, o)?;
        let o = s.graph.reshape(o, &[h, w, t, c])?;
        let o = s.graph.permute(o, &[3, 2, 0, 1])?;
        Ok((s.graph.add(x, o)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct MiddleBlock {
    pub block1: STBlock3D,
    pub attn: Option<Attention3D>,
    pub temporal_attn: Option<TemporalAttention>,
    pub block2: STBlock3D,
}

impl MiddleBlock {
    fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig, c: usize, layout: &Layout) -> Result<Self> {
        let block1 = STBlock3D::new(&mut b.push("block1"), c, c, layout.temporal_kernel)?;
        let attn = if cfg.attention_in_middle { Some(Attention3D::new(&mut b.push("attn"), c, Init::FanIn)?) } else { None };
        let temporal_attn = if cfg.temporal_attention && layout.temporal_kernel.is_some() {
            let mut t = b.temporal();
            Some(TemporalAttention::new(&mut t.push("temporal_attn"), c)?)
        } else {
            None
        };
        let block2 = STBlock3D::new(&mut b.push("block2"), c, c, layout.temporal_kernel)?;
        Ok(MiddleBlock { block1, attn, temporal_attn, block2 })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, image: bool) -> Result<Var> {
        let mut h = self.block1.forward(s, x, image)?;
        if let Some(attn) = &self.attn {
            h = attn.forward(s, h)?.0;
        }
        if let (Some(ta), false) = (&self.temporal_attn, image) {
            h = ta.forward(s, h)?.0;
        }
        self.block2.forward(s, h, image)
    }
}

/// A spatiotemporal block with its optional cross-modal block.
#[derive(Clone, Debug)]
pub struct ConditionedBlock {
    pub block: STBlock3D,
    pub cross: Option<CrossModalBlock>,
}

impl ConditionedBlock {
    fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, pass: Pass<'_>) -> Result<Var> {
        let h = self.block.forward(s, x, pass.image)?;
        match &self.cross {
            Some(cm) => {
                let text = pass.text.ok_or_else(|| Error::invalid("cross-modal blocks need a text embedding"))?;
                cm.forward(s, h, text)
            }
            None => Ok(h),
        }
    }
}

/// Structure choices derived from the config and variant.
#[derive(Clone, Debug)]
struct Layout {
    temporal_kernel: Option<[usize; 3]>,
    /// Levels after which (encoder) or before which (decoder) the frame axis is rescaled.
    temporal_levels: [bool; LEVELS],
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Self {
        let temporal_kernel = (cfg.variant != Variant::Sequential).then_some(cfg.temporal_kernel);
        let temporal_levels = if cfg.variant == Variant::Simultaneous { [false, true, true, false] } else { [false; LEVELS] };
        Layout { temporal_kernel, temporal_levels }
    }
}

fn conditioned_blocks<F: Real>(
    b: &mut Builder<'_, F>,
    cfg: &ModelConfig,
    layout: &Layout,
    level: usize,
    mut cin: usize,
    cout: usize,
) -> Result<Vec<ConditionedBlock>> {
    let n = cfg.res_blocks_per_level;
    let mut out = Vec::with_capacity(n);
    let mut blocks = b.push("blocks");
    for r in 0..n {
        let mut bb = blocks.push(r);
        let block = STBlock3D::new(&mut bb.push("st"), cin, cout, layout.temporal_kernel)?;
        let wants = cfg.crossmodal_enabled && (cfg.crossmodal_placement == Placement::EveryBlock || r + 1 == n);
        let cross = if wants {
            let mut scope = bb.push("cross");
            let mut stream = SeededRng::new(0);
            Some(CrossModalBlock::new(
                &mut scope.isolated(&mut stream),
                cout,
                cfg.patch_sizes[level],
                cfg.text_embed_dim,
                cfg.crossattn_dim,
                cfg.crossmodal_variant,
            )?)
        } else {
            None
        };
        out.push(ConditionedBlock { block, cross });
        cin = cout;
    }
    Ok(out)
}

fn check_frame_grid(shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 4 || shape[0] != channels {
        return Err(Error::shape(format!("expected ({channels}, T, H, W), got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
        return Err(Error::shape(format!("H and W must be divisible by {SPATIAL_FACTOR}, got {h}x{w}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<ConditionedBlock>,
    pub down: Option<Conv3d>,
}

/// E1: (C, T, H, W) pixels to (c, T, H/8, W/8), or to the (2c', T/4, H/8, W/8)
/// Gaussian moments in the simultaneous variant.
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    pub conv_in: Conv3d,
    pub levels: Vec<EncoderLevel>,
    pub mid: MiddleBlock,
    pub norm_out: GroupNorm,
    pub conv_out: Conv3d,
    pub in_channels: usize,
    pub out_channels: usize,
    pub rescales_time: bool,
}

impl SpatialEncoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let layout = Layout::of(cfg);
        let ch = cfg.level_channels();
        let conv_in = Conv3d::inflated(&mut b.push("conv_in"), cfg.image_channels, ch[0], 3, 1)?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut lv = b.push("levels");
        let mut cin = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            let mut lb = lv.push(l);
            let blocks = conditioned_blocks(&mut lb, cfg, &layout, l, cin, c)?;
            let down = if l + 1 < LEVELS {
                let mut d = lb.push("down");
                Some(if layout.temporal_levels[l + 1] {
                    Conv3d::inflated_deep(&mut d, c, c, 3, 3, [2, 2, 2])?
                } else {
                    Conv3d::inflated(&mut d, c, c, 3, 2)?
                })
            } else {
                None
            };
            levels.push(EncoderLevel { blocks, down });
            cin = c;
        }
        drop(lv);
        let top = ch[LEVELS - 1];
        let mid = MiddleBlock::new(&mut b.push("mid"), cfg, top, &layout)?;
        let norm_out = GroupNorm::new(&mut b.push("norm_out"), top)?;
        let out_channels = match cfg.variant {
            Variant::Simultaneous => 2 * cfg.latent_channels_z2,
            _ => cfg.z1_channels(),
        };
        let conv_out = Conv3d::inflated(&mut b.push("conv_out"), top, out_channels, 3, 1)?;
        Ok(SpatialEncoder {
            conv_in,
            levels,
            mid,
            norm_out,
            conv_out,
            in_channels: cfg.image_channels,
            out_channels,
            rescales_time: cfg.variant == Variant::Simultaneous,
        })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, pass: Pass<'_>) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        check_frame_grid(&shape, self.in_channels)?;
        if self.rescales_time && !pass.image && shape[1] % TEMPORAL_FACTOR != 0 {
            return Err(Error::shape(format!("T must be divisible by {TEMPORAL_FACTOR}, got {}", shape[1])));
        }
        let mut h = self.conv_in.forward(s, x)?;
        for level in &self.levels {
            for blk in &level.blocks {
                h = blk.forward(s, h, pass)?;
            }
            if let Some(down) = &level.down {
                h = if pass.image { down.forward_framewise(s, h)? } else { down.forward(s, h)? };
            }
        }
        h = self.mid.forward(s, h, pass.image)?;
        h = self.norm_out.forward(s, h)?;
        h = s.graph.silu(h);
        self.conv_out.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub blocks: Vec<ConditionedBlock>,
    /// Nearest-neighbour upsampling factors and the convolution after it.
    pub up: Option<([usize; 3], Conv3d)>,
}

/// D1: (c, T, h, w) latents back to (C, T, 8h, 8w) pixels, unclamped. In the
/// simultaneous variant the input is (c', T/4, h, w).
#[derive(Clone, Debug)]
pub struct SpatialDecoder {
    pub conv_in: Conv3d,
    pub mid: MiddleBlock,
    /// Ordered from the coarsest level to the finest.
    pub levels: Vec<DecoderLevel>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv3d,
    pub in_channels: usize,
}

impl SpatialDecoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let layout = Layout::of(cfg);
        let ch = cfg.level_channels();
        let in_channels = match cfg.variant {
            Variant::Simultaneous => cfg.latent_channels_z2,
            _ => cfg.z1_channels(),
        };
        let top = ch[LEVELS - 1];
        let conv_in = Conv3d::inflated(&mut b.push("conv_in"), in_channels, top, 3, 1)?;
        let mid = MiddleBlock::new(&mut b.push("mid"), cfg, top, &layout)?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut lv = b.push("levels");
        let mut cin = top;
        for l in (0..LEVELS).rev() {
            let mut lb = lv.push(l);
            let c = ch[l];
            let blocks = conditioned_blocks(&mut lb, cfg, &layout, l, cin, c)?;
            let up = if l > 0 {
                let ft = if layout.temporal_levels[l] { 2 } else { 1 };
                Some(([ft, 2, 2], Conv3d::inflated(&mut lb.push("up"), c, c, 3, 1)?))
            } else {
                None
            };
            levels.push(DecoderLevel { blocks, up });
            cin = c;
        }
        drop(lv);
        let norm_out = GroupNorm::new(&mut b.push("norm_out"), ch[0])?;
        let conv_out = Conv3d::inflated(&mut b.push("conv_out"), ch[0], cfg.image_channels, 3, 1)?;
        Ok(SpatialDecoder { conv_in, mid, levels, norm_out, conv_out, in_channels })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, z: Var, pass: Pass<'_>) -> Result<Var> {
        let shape = s.shape(z).to_vec();
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::shape(format!("decoder expects ({}, t, h, w), got {shape:?}", self.in_channels)));
        }
        let mut h = self.conv_in.forward(s, z)?;
        h = self.mid.forward(s, h, pass.image)?;
        for level in &self.levels {
            for blk in &level.blocks {
                h = blk.forward(s, h, pass)?;
            }
            if let Some((mut factors, conv)) = level.up.clone() {
                if pass.image {
                    factors[0] = 1;
                }
                h = s.graph.upsample(h, factors)?;
                h = conv.forward(s, h)?;
            }
        }
        h = self.norm_out.forward(s, h)?;
        h = s.graph.silu(h);
        self.conv_out.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, GroupSet, ParamStore};
    use crate::Tensor;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            base_channels: 8,
            channel_multipliers: alloc::vec![1, 1, 2, 2],
            temporal_channels: 8,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    fn build(cfg: &ModelConfig) -> (ParamStore<f64>, SpatialEncoder, SpatialDecoder) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(cfg.seed);
        let e = SpatialEncoder::new(&mut Builder::new(&mut store, &mut rng, "e1", Group::SpatialEncoder), cfg).unwrap();
        let d = SpatialDecoder::new(&mut Builder::new(&mut store, &mut rng, "d1", Group::SpatialDecoder), cfg).unwrap();
        (store, e, d)
    }

    fn encode(store: &ParamStore<f64>, e: &SpatialEncoder, x: &Tensor<f64>, image: bool) -> Result<Tensor<f64>> {
        let mut s = Session::new(store, GroupSet::NONE);
        let xv = s.constant(x.clone());
        let z = e.forward(&mut s, xv, Pass { text: None, image })?;
        Ok(s.value(z).clone())
    }

    fn decode(store: &ParamStore<f64>, d: &SpatialDecoder, z: &Tensor<f64>, image: bool) -> Tensor<f64> {
        let mut s = Session::new(store, GroupSet::NONE);
        let zv = s.constant(z.clone());
        let x = d.forward(&mut s, zv, Pass { text: None, image }).unwrap();
        s.value(x).clone()
    }

    #[test]
    fn encoder_shapes() {
        let cfg = tiny(Variant::Combined);
        let (store, e, d) = build(&cfg);
        let mut rng = SeededRng::new(1);
        for (input, z1) in [([3, 4, 32, 48], [4, 4, 4, 6]), ([3, 1, 16, 16], [4, 1, 2, 2])] {
            let x: Tensor<f64> = rng.uniform_tensor(&input, 1.0);
            let z = encode(&store, &e, &x, input[1] == 1).unwrap();
            assert_eq!(z.shape(), &z1);
            assert_eq!(decode(&store, &d, &z, input[1] == 1).shape(), &input);
        }
        assert!(encode(&store, &e, &Tensor::zeros(&[3, 4, 20, 16]), false).is_err());
    }

    #[test]
    fn simultaneous_compresses_time_in_one_stage() {
        let cfg = tiny(Variant::Simultaneous);
        let (store, e, d) = build(&cfg);
        let x: Tensor<f64> = SeededRng::new(2).uniform_tensor(&[3, 8, 16, 16], 1.0);
        let m = encode(&store, &e, &x, false).unwrap();
        assert_eq!(m.shape(), &[8, 2, 2, 2]);
        let z = m.narrow(0, 0, 4).unwrap();
        assert_eq!(decode(&store, &d, &z, false).shape(), x.shape());
        // Image mode keeps the single frame.
        let img = x.narrow(1, 0, 1).unwrap();
        let mi = encode(&store, &e, &img, true).unwrap();
        assert_eq!(mi.shape(), &[8, 1, 2, 2]);
        assert!(encode(&store, &e, &Tensor::zeros(&[3, 6, 16, 16]), false).is_err());
    }

    #[test]
    fn stblock_zero_temporal_equals_2d_path_and_keeps_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(3);
        let blk = STBlock3D::new(&mut Builder::new(&mut store, &mut rng, "b", Group::SpatialEncoder), 8, 8, Some([3, 3, 3])).unwrap();
        let x: Tensor<f64> = rng.normal_tensor(&[8, 4, 8, 8]);
        let run = |store: &ParamStore<f64>, image: bool| {
            let mut s = Session::new(store, GroupSet::NONE);
            let xv = s.constant(x.clone());
            let y = blk.forward(&mut s, xv, image).unwrap();
            s.value(y).clone()
        };
        let full = run(&store, false);
        assert_eq!(full.shape(), x.shape());
        assert_eq!(full, run(&store, true));

        let mut s = Session::new(&store, GroupSet::NONE);
        let bad = s.constant(Tensor::zeros(&[4, 4, 8, 8]));
        assert!(blk.forward(&mut s, bad, false).is_err());
    }

    #[test]
    fn stblock_constant_input_gives_constant_interior() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(4);
        let blk = STBlock3D::new(&mut Builder::new(&mut store, &mut rng, "b", Group::SpatialEncoder), 4, 8, Some([3, 3, 3])).unwrap();
        let w = store.value(blk.temporal_conv.as_ref().unwrap().weight).shape().to_vec();
        *store.value_mut(blk.temporal_conv.as_ref().unwrap().weight) = rng.normal_tensor(&w);
        // Per-channel constant input; interior voxels (away from every padded border) must agree.
        let x = Tensor::<f64>::from_fn(&[4, 8, 10, 10], |i| (i / 800) as f64 * 0.3 - 0.4);
        let mut s = Session::new(&store, GroupSet::NONE);
        let xv = s.constant(x);
        let y = blk.forward(&mut s, xv, false).unwrap();
        let y = s.value(y);
        for c in 0..8 {
            let at = |t: usize, h: usize, ww: usize| y.data()[((c * 8 + t) * 10 + h) * 10 + ww];
            let r = at(2, 2, 2);
            for t in 2..6 {
                for h in 2..8 {
                    for ww in 2..8 {
                        assert!((at(t, h, ww) - r).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_attention_single_frame_and_site_permutation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(5);
        let ta = TemporalAttention::new(&mut Builder::new(&mut store, &mut rng, "ta", Group::SpatialEncoder), 4).unwrap();
        let w = store.value(ta.proj.weight).shape().to_vec();
        *store.value_mut(ta.proj.weight) = rng.normal_tensor(&w);
        let run = |x: &Tensor<f64>| {
            let mut s = Session::new(&store, GroupSet::NONE);
            let xv = s.constant(x.clone());
            let (y, a) = ta.forward(&mut s, xv).unwrap();
            (s.value(y).clone(), s.value(a).clone())
        };
        let one: Tensor<f64> = rng.normal_tensor(&[4, 1, 2, 2]);
        let (_, a) = run(&one);
        assert!(a.data().iter().all(|&v| v == 1.0));

        let x: Tensor<f64> = rng.normal_tensor(&[4, 4, 2, 2]);
        let (y, a) = run(&x);
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Swap the sites (0,0) <-> (1,1) and (0,1) <-> (1,0): a 180 degree rotation.
        let rot = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[(i / 4) * 4 + 3 - i % 4]);
        let (yr, _) = run(&rot(&x));
        assert!(yr.max_abs_diff(&rot(&y)) < 1e-12);
    }

    #[test]
    fn attention3d_rows_normalized() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(6);
        let at = Attention3D::new(&mut Builder::new(&mut store, &mut rng, "a", Group::SpatialEncoder), 4, Init::FanIn).unwrap();
        let x: Tensor<f64> = rng.normal_tensor(&[4, 2, 2, 3]);
        let mut s = Session::new(&store, GroupSet::NONE);
        let xv = s.constant(x.clone());
        let (y, a) = at.forward(&mut s, xv).unwrap();
        assert_eq!(s.shape(y), x.shape());
        assert_eq!(s.shape(a), &[12, 12]);
        for row in s.value(a).data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_stage_has_no_temporal_parameters() {
        let cfg = tiny(Variant::Sequential);
        let (store, _, _) = build(&cfg);
        assert!(store.iter().all(|(_, info, _)| !info.temporal));
        let (store, _, _) = build(&tiny(Variant::Combined));
        assert!(store.iter().any(|(_, info, _)| info.temporal));
    }
}
