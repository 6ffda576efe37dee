//! The assembled autoencoder for all three architecture variants.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{ModelConfig, Variant};
use crate::crossmodal::TextCond;
use crate::graph::Var;
use crate::latent::sample_var;
use crate::losses::Discriminator3D;
use crate::params::{Builder, Group, GroupSet, ParamId, ParamStore, Session};
use crate::rng::SeededRng;
use crate::spatial::{Pass, SpatialDecoder, SpatialEncoder};
use crate::temporal::{split_moments, Moments, TemporalDecoder, TemporalEncoder};
use crate::text::{null_vector, TextEmbedding};
use crate::{Error, Real, Result, Tensor, VideoTensor};

/// How the Gaussian latent is turned into a decoder input.
pub enum Noise<'r, F> {
    Mean,
    Sample(&'r mut SeededRng),
    /// Externally fixed standard-normal noise of the latent's shape.
    Fixed(&'r Tensor<F>),
}

/// Intermediates of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub xhat: Var,
    /// Decoder input: Z1 for images, the Z2 sample for videos (or the
    /// single-stage latent in the simultaneous variant).
    pub latent: Var,
    /// Z2 posterior; `None` on image passes.
    pub moments: Option<Moments>,
}

#[derive(Clone, Debug)]
pub struct VideoVae {
    pub cfg: ModelConfig,
    pub e1: SpatialEncoder,
    pub d1: SpatialDecoder,
    pub e2: Option<TemporalEncoder>,
    pub d2: Option<TemporalDecoder>,
    /// Learned embedding used when the caption is empty.
    pub text_null: Option<ParamId>,
    pub disc: Discriminator3D,
}

impl VideoVae {
    /// Validates `cfg` and initializes every parameter from `cfg.seed`.
    pub fn build<F: Real>(cfg: &ModelConfig) -> Result<(Self, ParamStore<F>)> {
        let cfg = cfg.validate()?;
        let mut store = ParamStore::new();
        let root = SeededRng::new(cfg.seed);
        let mut rng = root.fork(1);
        let e1 = SpatialEncoder::new(&mut Builder::new(&mut store, &mut rng, "e1", Group::SpatialEncoder), &cfg)?;
        let mut rng = root.fork(2);
        let d1 = SpatialDecoder::new(&mut Builder::new(&mut store, &mut rng, "d1", Group::SpatialDecoder), &cfg)?;
        let (e2, d2) = if cfg.variant == Variant::Simultaneous {
            (None, None)
        } else {
            let mut rng = root.fork(3);
            let e2 = TemporalEncoder::new(&mut Builder::new(&mut store, &mut rng, "e2", Group::TemporalEncoder), &cfg)?;
            let mut rng = root.fork(4);
            let d2 = TemporalDecoder::new(&mut Builder::new(&mut store, &mut rng, "d2", Group::TemporalDecoder), &cfg)?;
            (Some(e2), Some(d2))
        };
        let text_null = if cfg.crossmodal_enabled {
            let null = Tensor::from_vec(&[1, cfg.text_embed_dim], null_vector(cfg.text_embed_dim).iter().map(|&v| F::from_f64(v as f64)).collect())?;
            let mut rng = root.fork(5);
            Some(Builder::new(&mut store, &mut rng, "text", Group::Text).param("null", null)?)
        } else {
            None
        };
        let mut rng = root.fork(6);
        let disc = Discriminator3D::new(
            &mut Builder::new(&mut store, &mut rng, "disc", Group::Discriminator),
            cfg.image_channels,
            cfg.disc_channels,
        )?;
        Ok((VideoVae { cfg, e1, d1, e2, d2, text_null, disc }, store))
    }

    /// Loads a caption into the pass; `None` when conditioning is disabled.
    pub fn text_cond<F: Real>(&self, s: &mut Session<'_, F>, text: Option<&TextEmbedding>) -> Result<Option<TextCond>> {
        if !self.cfg.crossmodal_enabled {
            return Ok(None);
        }
        let null;
        let text = match text {
            Some(t) => t,
            None => {
                null = crate::text::embed_text("", self.cfg.text_embed_dim)?;
                &null
            }
        };
        Ok(Some(TextCond::load(s, text, self.text_null, self.cfg.text_embed_dim)?))
    }

    fn stage_two(&self) -> Result<(&TemporalEncoder, &TemporalDecoder)> {
        match (&self.e2, &self.d2) {
            (Some(e), Some(d)) => Ok((e, d)),
            _ => Err(Error::invalid("this variant has no temporal autoencoder")),
        }
    }

    /// Applies `f` to every frame separately and concatenates the results along time.
    fn per_frame<F: Real>(
        s: &mut Session<'_, F>,
        x: Var,
        mut f: impl FnMut(&mut Session<'_, F>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let t = s.shape(x)[1];
        if t == 1 {
            return f(s, x);
        }
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let frame = s.graph.narrow(x, 1, i, 1)?;
            outs.push(f(s, frame)?);
        }
        s.graph.concat(&outs, 1)
    }

    /// Stage-one encoding of a clip; the sequential variant runs frame by frame.
    pub fn encode_stage1<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: Option<&TextCond>) -> Result<Var> {
        if self.cfg.variant == Variant::Sequential {
            Self::per_frame(s, x, |s, f| self.e1.forward(s, f, Pass { text, image: true }))
        } else {
            self.e1.forward(s, x, Pass { text, image: false })
        }
    }

    pub fn decode_stage1<F: Real>(&self, s: &mut Session<'_, F>, z: Var, text: Option<&TextCond>) -> Result<Var> {
        if self.cfg.variant == Variant::Sequential {
            Self::per_frame(s, z, |s, f| self.d1.forward(s, f, Pass { text, image: true }))
        } else {
            self.d1.forward(s, z, Pass { text, image: false })
        }
    }

    fn draw<F: Real>(s: &mut Session<'_, F>, m: Moments, noise: Noise<'_, F>) -> Result<Var> {
        match noise {
            Noise::Mean => Ok(m.mean),
            Noise::Sample(rng) => {
                let eps: Tensor<F> = rng.normal_tensor(s.shape(m.mean));
                sample_var(&mut s.graph, m.mean, m.log_var, Some(&eps))
            }
            Noise::Fixed(eps) => sample_var(&mut s.graph, m.mean, m.log_var, Some(eps)),
        }
    }

    /// Video pass: X to E1, E2, a latent draw, D2 and D1 (or the single stage).
    pub fn forward_full<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: Option<&TextCond>, noise: Noise<'_, F>) -> Result<Forward> {
        let t = s.shape(x).get(1).copied().unwrap_or(0);
        if t == 0 || t % crate::config::TEMPORAL_FACTOR != 0 {
            return Err(Error::shape(format!("video passes need T divisible by 4, got {t}")));
        }
        if self.cfg.variant == Variant::Simultaneous {
            let raw = self.e1.forward(s, x, Pass { text, image: false })?;
            let m = split_moments(s, raw)?;
            let z = Self::draw(s, m, noise)?;
            let xhat = self.d1.forward(s, z, Pass { text, image: false })?;
            return Ok(Forward { xhat, latent: z, moments: Some(m) });
        }
        let (e2, d2) = self.stage_two()?;
        let z1 = self.encode_stage1(s, x, text)?;
        let m = e2.forward(s, z1, text)?;
        let z2 = Self::draw(s, m, noise)?;
        let z1_hat = d2.forward(s, z2, text)?;
        let xhat = self.decode_stage1(s, z1_hat, text)?;
        Ok(Forward { xhat, latent: z2, moments: Some(m) })
    }

    /// Image pass: temporal layers bypassed and stage two skipped.
    pub fn forward_image<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: Option<&TextCond>) -> Result<Forward> {
        let t = s.shape(x).get(1).copied().unwrap_or(0);
        if t != 1 {
            return Err(Error::shape(format!("image passes take single frames, got T = {t}")));
        }
        let pass = Pass { text, image: true };
        let mut z = self.e1.forward(s, x, pass)?;
        if self.cfg.variant == Variant::Simultaneous {
            z = split_moments(s, z)?.mean;
        }
        let xhat = self.d1.forward(s, z, pass)?;
        Ok(Forward { xhat, latent: z, moments: None })
    }

    /// Deterministic latent: the posterior mean for clips, Z1 for single frames.
    pub fn encode<F: Real>(&self, store: &ParamStore<F>, x: &VideoTensor<F>, text: Option<&TextEmbedding>) -> Result<Tensor<F>> {
        let mut s = Session::new(store, GroupSet::NONE);
        let tc = self.text_cond(&mut s, text)?;
        let xv = s.constant(x.tensor().clone());
        let image = x.frames() == 1;
        let out = if image {
            self.forward_image_latent(&mut s, xv, tc.as_ref())?
        } else if self.cfg.variant == Variant::Simultaneous {
            let raw = self.e1.forward(&mut s, xv, Pass { text: tc.as_ref(), image: false })?;
            split_moments(&mut s, raw)?.mean
        } else {
            let (e2, _) = self.stage_two()?;
            let z1 = self.encode_stage1(&mut s, xv, tc.as_ref())?;
            e2.forward(&mut s, z1, tc.as_ref())?.mean
        };
        Ok(s.value(out).clone())
    }

    fn forward_image_latent<F: Real>(&self, s: &mut Session<'_, F>, x: Var, text: Option<&TextCond>) -> Result<Var> {
        let z = self.e1.forward(s, x, Pass { text, image: true })?;
        if self.cfg.variant == Variant::Simultaneous {
            Ok(split_moments(s, z)?.mean)
        } else {
            Ok(z)
        }
    }

    /// Unclamped reconstruction from a latent produced by [`VideoVae::encode`].
    pub fn decode<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>, text: Option<&TextEmbedding>, image: bool) -> Result<Tensor<F>> {
        let mut s = Session::new(store, GroupSet::NONE);
        let tc = self.text_cond(&mut s, text)?;
        let tc = tc.as_ref();
        let zv = s.constant(z.clone());
        let out = if image {
            self.d1.forward(&mut s, zv, Pass { text: tc, image: true })?
        } else if self.cfg.variant == Variant::Simultaneous {
            self.d1.forward(&mut s, zv, Pass { text: tc, image: false })?
        } else {
            let (_, d2) = self.stage_two()?;
            let z1 = d2.forward(&mut s, zv, tc)?;
            self.decode_stage1(&mut s, z1, tc)?
        };
        Ok(s.value(out).clone())
    }

    /// `decode(encode(x))` in mean mode.
    pub fn reconstruct<F: Real>(&self, store: &ParamStore<F>, x: &VideoTensor<F>, text: Option<&TextEmbedding>) -> Result<Tensor<F>> {
        let z = self.encode(store, x, text)?;
        self.decode(store, &z, text, x.frames() == 1)
    }

    /// Shape of [`VideoVae::encode`]'s output for a (C, T, H, W) input.
    pub fn latent_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        if input.len() == 4 && input[1] == 1 {
            let c = if self.cfg.variant == Variant::Simultaneous { self.cfg.latent_channels_z2 } else { self.cfg.z1_channels() };
            return Ok([c, 1, input[2] / 8, input[3] / 8]);
        }
        Ok(self.cfg.derived_shapes(input)?.z2)
    }
}
