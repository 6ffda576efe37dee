//! Joint image/video optimization: batch scheduling, temporal masking on
//! image steps, the generator and discriminator updates, and the resumable
//! training state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{LrSchedule, ModelConfig, Variant};
use crate::losses::{d_loss_var, effective_gan_weight, total_loss_var, DiscMode, LossReport};
use crate::model::{Noise, VideoVae};
use crate::params::{GroupSet, ParamId, ParamStore, Session};
use crate::rng::{RngState, SeededRng};
use crate::text::TextEmbedding;
use crate::{Error, Real, Result, Tensor, VideoTensor};

const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Video,
    Image,
}

/// Position `step` in the repeating cycle of `v` video steps then `i` image steps.
pub fn batch_schedule(step: u64, ratio: [u32; 2]) -> BatchKind {
    let (v, i) = (ratio[0] as u64, ratio[1] as u64);
    if v + i == 0 || step % (v + i) < v {
        BatchKind::Video
    } else {
        BatchKind::Image
    }
}

/// Sequential training spends its first phase on per-frame images and its
/// second on videos with the first stage frozen; the other variants follow
/// [`batch_schedule`].
pub fn expected_kind(cfg: &ModelConfig, step: u64) -> BatchKind {
    match (cfg.variant, cfg.sequential_freeze_steps) {
        (Variant::Sequential, Some(freeze)) if step < freeze => BatchKind::Image,
        (Variant::Sequential, _) => BatchKind::Video,
        _ => batch_schedule(step, cfg.video_image_ratio),
    }
}

/// Parameter groups the generator update may change at `step`.
pub fn trainable_groups(cfg: &ModelConfig, step: u64) -> GroupSet {
    match (cfg.variant, expected_kind(cfg, step)) {
        (Variant::Sequential, BatchKind::Image) => GroupSet::SPATIAL,
        (Variant::Sequential, BatchKind::Video) => GroupSet::TEMPORAL_AE,
        _ => GroupSet::GENERATOR,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    /// Updates applied to this parameter so far.
    pub t: u64,
}

/// Adaptive-moment optimizer with global-norm gradient clipping. Moments are
/// allocated lazily, so a parameter that never receives a gradient keeps no state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub betas: [f64; 2],
    pub clip: f64,
    pub slots: BTreeMap<ParamId, AdamSlot<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, betas: [f64; 2], clip: f64) -> Self {
        Adam { lr, betas, clip, slots: BTreeMap::new() }
    }

    /// Global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) -> f64 {
        let norm = libm::sqrt(grads.iter().flat_map(|(_, g)| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let [b1, b2] = self.betas;
        for (id, g) in grads {
            let slot = self.slots.entry(*id).or_insert_with(|| AdamSlot { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()), t: 0 });
            slot.t += 1;
            let t = slot.t as i32;
            let (c1, c2) = (1.0 - libm::pow(b1, t as f64), 1.0 - libm::pow(b2, t as f64));
            let step = F::from_f64(self.lr / c1);
            let inv_c2 = F::from_f64(1.0 / c2);
            let (fb1, fb2, fs, eps) = (F::from_f64(b1), F::from_f64(b2), F::from_f64(scale), F::from_f64(ADAM_EPS));
            let p = store.value_mut(*id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(slot.m.data_mut()).zip(slot.v.data_mut()) {
                let gv = gv * fs;
                *mv = fb1 * *mv + (F::one() - fb1) * gv;
                *vv = fb2 * *vv + (F::one() - fb2) * gv * gv;
                *pv -= step * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Learning rate applied by the update at `step`.
pub fn learning_rate_at(cfg: &ModelConfig, step: u64) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let progress = (step as f64 / cfg.train_steps.max(1) as f64).min(1.0);
            cfg.learning_rate * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
        }
    }
}

/// Everything needed to continue training bit-compatibly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    pub rng: RngState,
    pub config_hash: String,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, params: ParamStore<f32>) -> Self {
        let mk = || Adam::new(cfg.learning_rate, cfg.adam_betas, cfg.grad_clip);
        TrainState {
            params,
            opt_g: mk(),
            opt_d: mk(),
            step: 0,
            rng: SeededRng::new(cfg.seed).fork(0x7261_696e).state(),
            config_hash: cfg.hash_hex(),
        }
    }
}

/// One training example; frames of an image batch are separate samples with T = 1.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video: VideoTensor<f32>,
    pub text: Option<TextEmbedding>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub kind: BatchKind,
    pub samples: Vec<Sample>,
}

/// Generator objective of one sample plus the reconstruction it produced.
pub struct GeneratorPass<F> {
    pub report: LossReport,
    pub grads: Vec<(ParamId, Tensor<F>)>,
    pub xhat: Tensor<F>,
}

/// Forward and backward pass of the generator objective for one sample.
/// Gradients are reported for parameters in `trainable` that the pass touched.
#[allow(clippy::too_many_arguments)]
pub fn generator_pass<F: Real>(
    model: &VideoVae,
    store: &ParamStore<F>,
    x: &Tensor<F>,
    text: Option<&TextEmbedding>,
    kind: BatchKind,
    noise: Noise<'_, F>,
    step: u64,
    trainable: GroupSet,
    want_grads: bool,
) -> Result<GeneratorPass<F>> {
    let cfg = &model.cfg;
    let mut s = Session::new(store, trainable);
    let tc = model.text_cond(&mut s, text)?;
    let xv = s.constant(x.clone());
    let fwd = match kind {
        BatchKind::Video => model.forward_full(&mut s, xv, tc.as_ref(), noise)?,
        BatchKind::Image => model.forward_image(&mut s, xv, tc.as_ref())?,
    };
    let d_fake = if effective_gan_weight(cfg, step) > 0.0 {
        let mode = disc_mode(cfg, kind);
        Some(model.disc.forward(&mut s, fwd.xhat, mode)?)
    } else {
        None
    };
    let moments = fwd.moments.map(|m| (m.mean, m.log_var));
    let terms = total_loss_var(&mut s.graph, fwd.xhat, xv, moments, d_fake, step, cfg)?;
    let grads = if want_grads { s.graph.backward(terms.total)?.param_grads(&s.graph).collect() } else { Vec::new() };
    Ok(GeneratorPass { report: terms.report, grads, xhat: s.value(fwd.xhat).clone() })
}

pub fn disc_mode(cfg: &ModelConfig, kind: BatchKind) -> DiscMode {
    match kind {
        BatchKind::Image => DiscMode::Image,
        BatchKind::Video if cfg.image_gan => DiscMode::Image,
        BatchKind::Video => DiscMode::Video,
    }
}

/// Hinge discriminator objective on a real sample and a detached reconstruction.
pub fn discriminator_pass<F: Real>(
    model: &VideoVae,
    store: &ParamStore<F>,
    real: &Tensor<F>,
    fake: &Tensor<F>,
    mode: DiscMode,
) -> Result<(f64, Vec<(ParamId, Tensor<F>)>)> {
    let mut s = Session::new(store, GroupSet::DISCRIMINATOR);
    let r = s.constant(real.clone());
    let f = s.constant(fake.clone());
    let dr = model.disc.forward(&mut s, r, mode)?;
    let df = model.disc.forward(&mut s, f, mode)?;
    let loss = d_loss_var(&mut s.graph, dr, df)?;
    let grads = s.graph.backward(loss)?.param_grads(&s.graph).collect();
    Ok((s.value(loss).item().as_f64(), grads))
}

fn accumulate<F: Real>(acc: &mut BTreeMap<ParamId, Tensor<F>>, grads: Vec<(ParamId, Tensor<F>)>, weight: F) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b * weight),
            None => {
                acc.insert(id, g.map(|v| v * weight));
            }
        }
    }
}

/// Applies one generator update (and, after warmup, one discriminator update)
/// for `batch`, then advances the step counter. On error the state is unchanged.
pub fn training_step(model: &VideoVae, state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    let cfg = &model.cfg;
    let step = state.step;
    let kind = expected_kind(cfg, step);
    if batch.kind != kind {
        return Err(Error::invalid(format!("step {step} expects a {kind:?} batch, got {:?}", batch.kind)));
    }
    if batch.samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut rng = SeededRng::from_state(&state.rng).ok_or_else(|| Error::invalid("corrupt rng state"))?;
    let trainable = trainable_groups(cfg, step);
    let weight = 1.0f32 / batch.samples.len() as f32;
    let mut grads_g = BTreeMap::new();
    let mut fakes = Vec::with_capacity(batch.samples.len());
    let mut reports = Vec::with_capacity(batch.samples.len());
    for sample in &batch.samples {
        let pass = generator_pass(
            model,
            &state.params,
            sample.video.tensor(),
            sample.text.as_ref(),
            kind,
            Noise::Sample(&mut rng),
            step,
            trainable,
            true,
        )?;
        accumulate(&mut grads_g, pass.grads, weight);
        reports.push(pass.report);
        fakes.push(pass.xhat);
    }
    let mut report = LossReport::mean(&reports);

    let mut grads_d = BTreeMap::new();
    if report.lambda_gan > 0.0 {
        let mode = disc_mode(cfg, kind);
        let mut d_total = 0.0;
        for (sample, fake) in batch.samples.iter().zip(&fakes) {
            let (d, g) = discriminator_pass(model, &state.params, sample.video.tensor(), fake, mode)?;
            d_total += d;
            accumulate(&mut grads_d, g, weight);
        }
        report.gan_d = d_total / batch.samples.len() as f64;
    }
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite { term });
    }
    let lr = learning_rate_at(cfg, step);
    state.opt_g.lr = lr;
    state.opt_d.lr = lr;
    let grads_g: Vec<_> = grads_g.into_iter().collect();
    state.opt_g.step(&mut state.params, &grads_g);
    if !grads_d.is_empty() {
        let grads_d: Vec<_> = grads_d.into_iter().collect();
        state.opt_d.step(&mut state.params, &grads_d);
    }
    state.rng = rng.state();
    state.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn tiny(ratio: [u32; 2]) -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            channel_multipliers: alloc::vec![1, 1, 2, 2],
            temporal_channels: 8,
            disc_channels: 4,
            video_image_ratio: ratio,
            learning_rate: 1e-3,
            gan_warmup_steps: 3,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    fn clip(seed: u64) -> VideoTensor<f32> {
        let mut rng = SeededRng::new(seed);
        VideoTensor::new(rng.uniform_tensor(&[3, 4, 16, 16], 0.9)).unwrap()
    }

    fn batch_for(cfg: &ModelConfig, step: u64, v: &VideoTensor<f32>) -> Batch {
        let kind = expected_kind(cfg, step);
        let samples = match kind {
            BatchKind::Video => alloc::vec![Sample { video: v.clone(), text: None }],
            BatchKind::Image => (0..v.frames()).map(|t| Sample { video: v.frame(t).unwrap(), text: None }).collect(),
        };
        Batch { kind, samples }
    }

    #[test]
    fn schedule_cycle() {
        let kinds: Vec<_> = (0..11).map(|s| batch_schedule(s, [8, 2])).collect();
        assert!(kinds[..8].iter().all(|&k| k == BatchKind::Video));
        assert_eq!(&kinds[8..10], &[BatchKind::Image, BatchKind::Image]);
        assert_eq!(kinds[10], BatchKind::Video);
        assert!((0..50).all(|s| batch_schedule(s, [1, 0]) == BatchKind::Video));
        assert!((0..50).all(|s| batch_schedule(s, [0, 1]) == BatchKind::Image));
        for (v, i) in [(8u32, 2u32), (3, 5), (1, 1)] {
            let n = 10 * (v + i) as u64;
            let videos = (0..n).filter(|&s| batch_schedule(s, [v, i]) == BatchKind::Video).count() as u64;
            assert_eq!(videos, 10 * v as u64);
        }
    }

    #[test]
    fn cosine_learning_rate() {
        let mut cfg = ModelConfig { train_steps: 100, ..tiny([1, 1]) };
        assert_eq!(learning_rate_at(&cfg, 70), 1e-3);
        cfg.lr_schedule = LrSchedule::Cosine;
        assert_eq!(learning_rate_at(&cfg, 0), 1e-3);
        assert!((learning_rate_at(&cfg, 50) - 5e-4).abs() < 1e-15);
        assert!(learning_rate_at(&cfg, 100).abs() < 1e-15);
        assert!(learning_rate_at(&cfg, 30) > learning_rate_at(&cfg, 31));
    }

    #[test]
    fn image_steps_leave_temporal_state_alone_and_warmup_freezes_disc() {
        let cfg = tiny([1, 1]);
        let (model, params) = VideoVae::build::<f32>(&cfg).unwrap();
        let mut state = TrainState::new(&model.cfg, params);
        let v = clip(1);
        training_step(&model, &mut state, &batch_for(&cfg, 0, &v)).unwrap();
        let before = state.clone();
        let report = training_step(&model, &mut state, &batch_for(&cfg, 1, &v)).unwrap();
        assert_eq!(report.kl, 0.0);
        assert_eq!(report.gan_g, 0.0);
        let mut spatial_changed = false;
        for (id, info, value) in state.params.iter() {
            let old = before.params.value(id);
            if info.temporal || info.group == Group::Discriminator {
                assert_eq!(value, old, "{}", info.name);
                assert_eq!(state.opt_g.slots.get(&id), before.opt_g.slots.get(&id), "{}", info.name);
            } else if value != old {
                spatial_changed = true;
            }
        }
        assert!(spatial_changed);
        assert!(state.opt_d.slots.is_empty());
        assert_eq!(state.step, 2);
        assert!(training_step(&model, &mut state, &batch_for(&cfg, 1, &v)).is_err());
    }

    #[test]
    fn runs_are_reproducible_and_overfit() {
        let cfg = ModelConfig { gan_warmup_steps: 1000, video_image_ratio: [1, 0], ..tiny([1, 0]) };
        let v = clip(2);
        let run = |steps: u64| {
            let (model, params) = VideoVae::build::<f32>(&cfg).unwrap();
            let mut state = TrainState::new(&model.cfg, params);
            (0..steps).map(|s| training_step(&model, &mut state, &batch_for(&cfg, s, &v)).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(10), run(10));
        assert_eq!(a, b);
        let long = run(201);
        assert!(long[200].recon_pixel < long[0].recon_pixel, "{} -> {}", long[0].recon_pixel, long[200].recon_pixel);
    }

    #[test]
    fn gan_engages_after_warmup() {
        let cfg = tiny([1, 0]);
        let (model, params) = VideoVae::build::<f32>(&cfg).unwrap();
        let mut state = TrainState::new(&model.cfg, params);
        let v = clip(3);
        let disc_ids: Vec<_> = state.params.iter().filter(|(_, i, _)| i.group == Group::Discriminator).map(|(id, _, _)| id).collect();
        for s in 0..cfg.gan_warmup_steps {
            let before: Vec<_> = disc_ids.iter().map(|&id| state.params.value(id).clone()).collect();
            let r = training_step(&model, &mut state, &batch_for(&cfg, s, &v)).unwrap();
            assert_eq!((r.gan_g, r.gan_d, r.lambda_gan), (0.0, 0.0, 0.0));
            let after: Vec<_> = disc_ids.iter().map(|&id| state.params.value(id).clone()).collect();
            assert_eq!(before, after);
        }
        let r = training_step(&model, &mut state, &batch_for(&cfg, cfg.gan_warmup_steps, &v)).unwrap();
        assert!(r.lambda_gan > 0.0 && r.gan_d > 0.0);
        assert!(!state.opt_d.slots.is_empty());
        assert!((r.total - r.recomputed_total()).abs() < 1e-5);
    }

    #[test]
    fn sequential_phases() {
        let cfg = ModelConfig { variant: Variant::Sequential, train_steps: 4, sequential_freeze_steps: Some(2), ..tiny([8, 2]) }
            .validate()
            .unwrap();
        assert_eq!(expected_kind(&cfg, 1), BatchKind::Image);
        assert_eq!(expected_kind(&cfg, 2), BatchKind::Video);
        assert_eq!(trainable_groups(&cfg, 3), GroupSet::TEMPORAL_AE);
        let (model, params) = VideoVae::build::<f32>(&cfg).unwrap();
        let mut state = TrainState::new(&model.cfg, params);
        let v = clip(4);
        for s in 0..2 {
            training_step(&model, &mut state, &batch_for(&cfg, s, &v)).unwrap();
        }
        let frozen = state.clone();
        training_step(&model, &mut state, &batch_for(&cfg, 2, &v)).unwrap();
        for (id, info, value) in state.params.iter() {
            let unchanged = value == frozen.params.value(id);
            match info.group {
                Group::SpatialEncoder | Group::SpatialDecoder => assert!(unchanged, "{}", info.name),
                Group::TemporalDecoder => {}
                _ => {}
            }
        }
    }

    #[test]
    fn adam_clips_by_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        let id = crate::params::Builder::new(&mut store, &mut rng, "p", Group::Text).zeros("w", &[2]).unwrap();
        let mut opt = Adam::new(0.1, [0.9, 0.999], 1.0);
        let g = Tensor::from_vec(&[2], alloc::vec![3.0, 4.0]).unwrap();
        assert_eq!(opt.step(&mut store, &[(id, g)]), 5.0);
        // First Adam step moves each coordinate by lr * sign(g) (up to eps).
        for &v in store.value(id).data() {
            assert!((v + 0.1).abs() < 1e-6);
        }
        assert_eq!(opt.slots[&id].t, 1);
    }
}
