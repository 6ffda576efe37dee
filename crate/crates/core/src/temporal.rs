//! Second stage: the temporal autoencoder (E2, D2) that compresses the frame
//! axis of Z1 by 4 into the Gaussian latent Z2. The decoder is deliberately
//! heavier than the encoder: two residual blocks per upsampling stage against
//! one per downsampling stage.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{ModelConfig, TEMPORAL_FACTOR};
use crate::crossmodal::{CrossModalBlock, TextCond};
use crate::graph::{ConvSpec, Var};
use crate::latent::clamp_log_var;
use crate::nn::{Conv3d, GroupNorm, Init};
use crate::params::{Builder, ParamId, Session};
use crate::rng::SeededRng;
use crate::{Error, Real, Result};

const K: [usize; 3] = [3, 3, 3];
const STAGES: usize = 2;

/// Two (3, 3, 3) convolutions around a residual connection.
#[derive(Clone, Debug)]
pub struct ResBlock3D {
    pub norm1: GroupNorm,
    pub conv1: Conv3d,
    pub norm2: GroupNorm,
    pub conv2: Conv3d,
    pub shortcut: Option<Conv3d>,
}

impl ResBlock3D {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize) -> Result<Self> {
        Ok(ResBlock3D {
            norm1: GroupNorm::new(&mut b.push("norm1"), cin)?,
            conv1: Conv3d::same(&mut b.push("conv1"), cin, cout, K, Init::FanIn)?,
            norm2: GroupNorm::new(&mut b.push("norm2"), cout)?,
            conv2: Conv3d::same(&mut b.push("conv2"), cout, cout, K, Init::FanIn)?,
            shortcut: if cin != cout { Some(Conv3d::same(&mut b.push("shortcut"), cin, cout, [1, 1, 1], Init::FanIn)?) } else { None },
        })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = s.graph.silu(h);
        let h = self.conv1.forward(s, h)?;
        let h = self.norm2.forward(s, h)?;
        let h = s.graph.silu(h);
        let h = self.conv2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(s, x)?,
            None => x,
        };
        s.graph.add(skip, h)
    }
}

/// A residual block followed by its optional per-pixel cross-modal block.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub res: ResBlock3D,
    pub cross: Option<CrossModalBlock>,
}

impl TemporalBlock {
    fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig, c: usize) -> Result<Self> {
        let res = ResBlock3D::new(&mut b.push("res"), c, c)?;
        let cross = if cfg.crossmodal_enabled {
            let mut scope = b.push("cross");
            let mut stream = SeededRng::new(0);
            Some(CrossModalBlock::new(&mut scope.isolated(&mut stream), c, 1, cfg.text_embed_dim, cfg.crossattn_dim, cfg.crossmodal_variant)?)
        } else {
            None
        };
        Ok(TemporalBlock { res, cross })
    }

    fn forward<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: Option<&TextCond>) -> Result<Var> {
        let h = self.res.forward(s, x)?;
        match (&self.cross, text) {
            (Some(cm), Some(t)) => cm.forward(s, h, t),
            (Some(_), None) => Err(Error::invalid("cross-modal blocks need a text embedding")),
            (None, _) => Ok(h),
        }
    }
}

/// Raw encoder outputs: the clamped log-variance and the mean.
#[derive(Clone, Copy, Debug)]
pub struct Moments {
    pub mean: Var,
    pub log_var: Var,
}

/// Splits a (2c', ...) map into its mean and clamped log-variance halves.
pub fn split_moments<F: Real>(s: &mut Session<'_, F>, raw: Var) -> Result<Moments> {
    let c2 = s.shape(raw)[0];
    if c2 % 2 != 0 {
        return Err(Error::shape(format!("moment map must have an even channel count, got {c2}")));
    }
    let mean = s.graph.narrow(raw, 0, 0, c2 / 2)?;
    let lv = s.graph.narrow(raw, 0, c2 / 2, c2 / 2)?;
    Ok(Moments { mean, log_var: clamp_log_var(&mut s.graph, lv) })
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub block: TemporalBlock,
    pub down: Conv3d,
}

/// E2: Z1 (c, T, h, w) to Gaussian moments (c', T/4, h, w).
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub conv_in: Conv3d,
    pub stages: Vec<EncoderStage>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv3d,
    pub in_channels: usize,
}

impl TemporalEncoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.temporal();
        let (c, tc) = (cfg.z1_channels(), cfg.temporal_channels);
        let conv_in = Conv3d::same(&mut b.push("conv_in"), c, tc, K, Init::FanIn)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut sb = b.push("stages");
        for i in 0..STAGES {
            let mut st = sb.push(i);
            let block = TemporalBlock::new(&mut st.push("block"), cfg, tc)?;
            let down = Conv3d::new(&mut st.push("down"), tc, tc, K, ConvSpec { stride: [2, 1, 1], pad: [1, 1, 1] }, Init::FanIn)?;
            stages.push(EncoderStage { block, down });
        }
        drop(sb);
        let norm_out = GroupNorm::new(&mut b.push("norm_out"), tc)?;
        let conv_out = Conv3d::same(&mut b.push("conv_out"), tc, 2 * cfg.latent_channels_z2, K, Init::FanIn)?;
        Ok(TemporalEncoder { conv_in, stages, norm_out, conv_out, in_channels: c })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, z1: Var, text: Option<&TextCond>) -> Result<Moments> {
        let shape = s.shape(z1).to_vec();
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::shape(format!("temporal encoder expects ({}, T, h, w), got {shape:?}", self.in_channels)));
        }
        if shape[1] == 0 || shape[1] % TEMPORAL_FACTOR != 0 {
            return Err(Error::shape(format!("T must be divisible by {TEMPORAL_FACTOR}, got {}", shape[1])));
        }
        let mut h = self.conv_in.forward(s, z1)?;
        for st in &self.stages {
            h = st.block.forward(s, h, text)?;
            h = st.down.forward(s, h)?;
        }
        h = self.norm_out.forward(s, h)?;
        h = s.graph.silu(h);
        let raw = self.conv_out.forward(s, h)?;
        split_moments(s, raw)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = conv_ids(&self.conv_in);
        for st in &self.stages {
            ids.extend(block_ids(&st.block));
            ids.extend(conv_ids(&st.down));
        }
        ids.extend([self.norm_out.gamma, self.norm_out.beta]);
        ids.extend(conv_ids(&self.conv_out));
        ids
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Conv3d,
    pub blocks: [TemporalBlock; 2],
}

/// D2: Z2 samples (c', t, h, w) back to (c, 4t, h, w).
#[derive(Clone, Debug)]
pub struct TemporalDecoder {
    pub conv_in: Conv3d,
    pub stages: Vec<DecoderStage>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv3d,
    pub in_channels: usize,
}

impl TemporalDecoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.temporal();
        let tc = cfg.temporal_channels;
        let conv_in = Conv3d::same(&mut b.push("conv_in"), cfg.latent_channels_z2, tc, K, Init::FanIn)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut sb = b.push("stages");
        for i in 0..STAGES {
            let mut st = sb.push(i);
            let up = Conv3d::same(&mut st.push("up"), tc, tc, K, Init::FanIn)?;
            let b0 = TemporalBlock::new(&mut st.push("block0"), cfg, tc)?;
            let b1 = TemporalBlock::new(&mut st.push("block1"), cfg, tc)?;
            stages.push(DecoderStage { up, blocks: [b0, b1] });
        }
        drop(sb);
        let norm_out = GroupNorm::new(&mut b.push("norm_out"), tc)?;
        let conv_out = Conv3d::same(&mut b.push("conv_out"), tc, cfg.z1_channels(), K, Init::FanIn)?;
        Ok(TemporalDecoder { conv_in, stages, norm_out, conv_out, in_channels: cfg.latent_channels_z2 })
    }

    pub fn forward<F: Real>(&self, s: &mut Session<'_, F>, z2: Var, text: Option<&TextCond>) -> Result<Var> {
        let shape = s.shape(z2).to_vec();
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::shape(format!("temporal decoder expects ({}, t, h, w), got {shape:?}", self.in_channels)));
        }
        let mut h = self.conv_in.forward(s, z2)?;
        for st in &self.stages {
            h = s.graph.upsample(h, [2, 1, 1])?;
            h = st.up.forward(s, h)?;
            for blk in &st.blocks {
                h = blk.forward(s, h, text)?;
            }
        }
        h = self.norm_out.forward(s, h)?;
        h = s.graph.silu(h);
        self.conv_out.forward(s, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = conv_ids(&self.conv_in);
        for st in &self.stages {
            ids.extend(conv_ids(&st.up));
            for blk in &st.blocks {
                ids.extend(block_ids(blk));
            }
        }
        ids.extend([self.norm_out.gamma, self.norm_out.beta]);
        ids.extend(conv_ids(&self.conv_out));
        ids
    }
}

fn conv_ids(c: &Conv3d) -> Vec<ParamId> {
    alloc::vec![c.weight, c.bias]
}

fn block_ids(b: &TemporalBlock) -> Vec<ParamId> {
    let r = &b.res;
    let mut ids = alloc::vec![r.norm1.gamma, r.norm1.beta, r.norm2.gamma, r.norm2.beta];
    ids.extend(conv_ids(&r.conv1));
    ids.extend(conv_ids(&r.conv2));
    if let Some(sc) = &r.shortcut {
        ids.extend(conv_ids(sc));
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_params;
    use crate::params::{Group, GroupSet, ParamStore};
    use crate::Tensor;
    use proptest::prelude::*;

    fn cfg(c2: usize, tc: usize) -> ModelConfig {
        ModelConfig { latent_channels_z2: c2, temporal_channels: tc, ..Default::default() }.validate().unwrap()
    }

    fn build(cfg: &ModelConfig) -> (ParamStore<f64>, TemporalEncoder, TemporalDecoder) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(9);
        let e = TemporalEncoder::new(&mut Builder::new(&mut store, &mut rng, "e2", Group::TemporalEncoder), cfg).unwrap();
        let d = TemporalDecoder::new(&mut Builder::new(&mut store, &mut rng, "d2", Group::TemporalDecoder), cfg).unwrap();
        (store, e, d)
    }

    fn enc(store: &ParamStore<f64>, e: &TemporalEncoder, z1: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut s = Session::new(store, GroupSet::NONE);
        let z = s.constant(z1.clone());
        let m = e.forward(&mut s, z, None)?;
        Ok((s.value(m.mean).clone(), s.value(m.log_var).clone()))
    }

    fn dec(store: &ParamStore<f64>, d: &TemporalDecoder, z2: &Tensor<f64>) -> Tensor<f64> {
        let mut s = Session::new(store, GroupSet::NONE);
        let z = s.constant(z2.clone());
        let y = d.forward(&mut s, z, None).unwrap();
        s.value(y).clone()
    }

    #[test]
    fn shapes_follow_the_quarter_rule() {
        let c = cfg(4, 8);
        let (store, e, d) = build(&c);
        let z1: Tensor<f64> = SeededRng::new(1).normal_tensor(&[4, 16, 8, 8]);
        let (m, lv) = enc(&store, &e, &z1).unwrap();
        assert_eq!(m.shape(), &[4, 4, 8, 8]);
        assert_eq!(lv.shape(), &[4, 4, 8, 8]);
        assert_eq!(dec(&store, &d, &m).shape(), &[4, 16, 8, 8]);
        assert!(enc(&store, &e, &Tensor::zeros(&[4, 6, 8, 8])).is_err());

        let c16 = cfg(16, 8);
        let (store, e, d) = build(&c16);
        let (m, _) = enc(&store, &e, &Tensor::zeros(&[16, 4, 8, 8])).unwrap();
        assert_eq!(m.shape(), &[16, 1, 8, 8]);
        assert_eq!(dec(&store, &d, &Tensor::zeros(&[16, 1, 8, 8])).shape(), &[16, 4, 8, 8]);
    }

    #[test]
    fn decoder_is_heavier_than_encoder() {
        for (c2, tc) in [(4, 8), (16, 8), (4, 64), (16, 32)] {
            let c = cfg(c2, tc);
            let (store, e, d) = build(&c);
            let (ne, nd) = (count_params(&store, e.param_ids()), count_params(&store, d.param_ids()));
            assert_eq!(ne, store.count(GroupSet::of(&[Group::TemporalEncoder])));
            assert_eq!(nd, store.count(GroupSet::of(&[Group::TemporalDecoder])));
            assert!(nd > ne, "{c2} {tc}: {nd} <= {ne}");
        }
    }

    #[test]
    fn every_latent_frame_matters() {
        let c = cfg(4, 8);
        let (store, _, d) = build(&c);
        let z2: Tensor<f64> = SeededRng::new(3).normal_tensor(&[4, 3, 2, 2]);
        let base = dec(&store, &d, &z2);
        for t in 0..3 {
            let mut z = z2.clone();
            let (plane, inner) = (3 * 4, 4);
            for ch in 0..4 {
                let start = ch * plane + t * inner;
                z.data_mut()[start..start + inner].iter_mut().for_each(|v| *v = 0.0);
            }
            assert!(dec(&store, &d, &z).max_abs_diff(&base) > 1e-9, "frame {t}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn round_trip_preserves_shape(c2 in prop::sample::select(alloc::vec![1usize, 4, 16]), t in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let c = cfg(c2, 4);
            let (store, e, d) = build(&c);
            let z1 = Tensor::<f64>::zeros(&[c2, 4 * t, h, w]);
            let (m, _) = enc(&store, &e, &z1).unwrap();
            prop_assert_eq!(m.shape(), &[c2, t, h, w]);
            let out = dec(&store, &d, &m);
            prop_assert_eq!(out.shape(), z1.shape());
        }
    }
}
