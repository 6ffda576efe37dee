//! Architecture and training hyperparameters, with validation.
//!
//! A config is a single JSON document whose keys are exactly the field names
//! of [`ModelConfig`]; missing keys take their defaults and unknown keys are
//! rejected.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How spatial and temporal compression are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Temporal-aware spatial AE (8x spatial) followed by a temporal AE (4x time), trained jointly.
    #[default]
    Combined,
    /// One inflated network compresses space and time together (4x8x8 in a single stage).
    Simultaneous,
    /// A per-frame 2D AE trained first and frozen, then a temporal AE on its latents.
    Sequential,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Combined => "combined",
            Variant::Simultaneous => "simultaneous",
            Variant::Sequential => "sequential",
        }
    }
}

/// Query/key/value arrangement inside the cross-modal blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttention {
    /// Visual queries against text keys and text values.
    #[default]
    Standard,
    /// Visual queries and visual values; text keys produce a per-token gate.
    Gated,
}

/// Where cross-modal blocks sit inside each resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    EveryBlock,
    LastBlock,
}

/// Norm of the pixel reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelLoss {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

/// How the learning rate evolves over `train_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero at `train_steps`.
    Cosine,
}

pub const LEVELS: usize = 4;
/// Spatial downsampling of the first stage (three stride-2 levels).
pub const SPATIAL_FACTOR: usize = 8;
/// Temporal downsampling of the second stage (two stride-2 levels).
pub const TEMPORAL_FACTOR: usize = 4;

const PARITY_KERNELS: [[usize; 3]; 6] = [[3, 1, 1], [5, 1, 1], [7, 1, 1], [3, 3, 3], [5, 3, 3], [7, 3, 3]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_channels: usize,
    /// Channels of the first-stage latent; `None` means "same as `latent_channels_z2`".
    pub latent_channels_z1: Option<usize>,
    pub latent_channels_z2: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Kernel of the temporal convolution inside every spatiotemporal block, (kt, kh, kw).
    pub temporal_kernel: [usize; 3],
    pub attention_in_middle: bool,
    pub temporal_attention: bool,
    /// Hidden width of the temporal autoencoder.
    pub temporal_channels: usize,
    pub crossmodal_enabled: bool,
    pub crossmodal_variant: CrossAttention,
    pub crossmodal_placement: Placement,
    pub text_embed_dim: usize,
    pub crossattn_dim: usize,
    pub max_text_tokens: usize,
    pub patch_sizes: Vec<usize>,
    pub disc_channels: usize,
    pub pixel_loss: PixelLoss,
    pub lambda_kl: f64,
    pub lambda_gan: f64,
    pub lambda_perceptual: f64,
    pub gan_warmup_steps: u64,
    /// Use the single-frame discriminator instead of the spatiotemporal one on video steps.
    pub image_gan: bool,
    pub video_image_ratio: [u32; 2],
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_betas: [f64; 2],
    pub grad_clip: f64,
    pub batch_videos: usize,
    /// Videos whose frames are unstacked into one image batch.
    pub image_batch_videos: usize,
    pub train_steps: u64,
    /// Sequential variant only: steps spent on the per-frame stage before it is frozen.
    pub sequential_freeze_steps: Option<u64>,
    /// Restrict the latent width and temporal kernel to the published settings.
    pub paper_parity: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Combined,
            image_channels: 3,
            latent_channels_z1: None,
            latent_channels_z2: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4],
            res_blocks_per_level: 1,
            temporal_kernel: [3, 3, 3],
            attention_in_middle: true,
            temporal_attention: true,
            temporal_channels: 64,
            crossmodal_enabled: false,
            crossmodal_variant: CrossAttention::Standard,
            crossmodal_placement: Placement::EveryBlock,
            text_embed_dim: 64,
            crossattn_dim: 64,
            max_text_tokens: 77,
            patch_sizes: vec![8, 4, 2, 1],
            disc_channels: 32,
            pixel_loss: PixelLoss::L1,
            lambda_kl: 1e-6,
            lambda_gan: 0.1,
            lambda_perceptual: 1.0,
            gan_warmup_steps: 500,
            image_gan: false,
            video_image_ratio: [8, 2],
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            adam_betas: [0.5, 0.9],
            grad_clip: 1.0,
            batch_videos: 1,
            image_batch_videos: 1,
            train_steps: 1000,
            sequential_freeze_steps: None,
            paper_parity: false,
            seed: 0,
        }
    }
}

/// Latent shapes implied by a config for a given (C, T, H, W) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivedShapes {
    pub z1: [usize; 4],
    /// Shape of the Gaussian latent's mean (and log-variance).
    pub z2: [usize; 4],
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelConfig>(text).map_err(|e| Error::config("<json>", format!("{e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every invariant and fills derived defaults. Idempotent.
    pub fn validate(&self) -> Result<ModelConfig> {
        let mut c = self.clone();
        let positive = |field: &'static str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        if !(c.image_channels == 1 || c.image_channels == 3) {
            return Err(Error::config("image_channels", "must be 1 or 3"));
        }
        positive("latent_channels_z2", c.latent_channels_z2)?;
        positive("base_channels", c.base_channels)?;
        positive("res_blocks_per_level", c.res_blocks_per_level)?;
        positive("temporal_channels", c.temporal_channels)?;
        positive("text_embed_dim", c.text_embed_dim)?;
        positive("crossattn_dim", c.crossattn_dim)?;
        positive("max_text_tokens", c.max_text_tokens)?;
        positive("disc_channels", c.disc_channels)?;
        positive("batch_videos", c.batch_videos)?;
        positive("image_batch_videos", c.image_batch_videos)?;
        let z1 = c.latent_channels_z1.unwrap_or(c.latent_channels_z2);
        positive("latent_channels_z1", z1)?;
        c.latent_channels_z1 = Some(z1);
        if c.channel_multipliers.len() != LEVELS {
            return Err(Error::config("channel_multipliers", "channel_multipliers must have 4 entries"));
        }
        if c.channel_multipliers.contains(&0) {
            return Err(Error::config("channel_multipliers", "entries must be positive"));
        }
        if c.patch_sizes.len() != LEVELS {
            return Err(Error::config("patch_sizes", "patch_sizes must have 4 entries"));
        }
        // Every level's feature map is (H / 2^level); its patch must tile the 8x8-aligned grid.
        for (level, &p) in c.patch_sizes.iter().enumerate() {
            if p == 0 || (SPATIAL_FACTOR >> level) % p != 0 {
                return Err(Error::config("patch_sizes", format!("patch size {p} does not tile level {level}")));
            }
        }
        if c.temporal_kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config("temporal_kernel", "kernel extents must be odd"));
        }
        for (field, v) in [("lambda_kl", c.lambda_kl), ("lambda_gan", c.lambda_gan), ("lambda_perceptual", c.lambda_perceptual)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "loss weights must be ≥ 0"));
            }
        }
        if c.video_image_ratio[0] + c.video_image_ratio[1] == 0 {
            return Err(Error::config("video_image_ratio", "ratio must have at least one step per cycle"));
        }
        if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if c.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("adam_betas", "betas must lie in [0, 1)"));
        }
        if !(c.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if c.paper_parity {
            if !(c.latent_channels_z2 == 4 || c.latent_channels_z2 == 16) {
                return Err(Error::config("latent_channels_z2", "paper-parity configs use 4 or 16 latent channels"));
            }
            if !PARITY_KERNELS.contains(&c.temporal_kernel) {
                return Err(Error::config("temporal_kernel", "not one of the published kernel sizes"));
            }
        }
        if c.variant == Variant::Sequential {
            let freeze = c.sequential_freeze_steps.unwrap_or(c.train_steps / 2);
            if freeze > c.train_steps {
                return Err(Error::config("sequential_freeze_steps", "cannot exceed train_steps"));
            }
            c.sequential_freeze_steps = Some(freeze);
        }
        Ok(c)
    }

    pub fn z1_channels(&self) -> usize {
        self.latent_channels_z1.unwrap_or(self.latent_channels_z2)
    }

    /// Channel width of each resolution level.
    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Latent shapes for a video input; errors when the input cannot be compressed.
    pub fn derived_shapes(&self, input: &[usize]) -> Result<DerivedShapes> {
        if input.len() != 4 {
            return Err(Error::shape(format!("expected (C, T, H, W), got {input:?}")));
        }
        let (t, h, w) = (input[1], input[2], input[3]);
        if h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("H and W must be divisible by {SPATIAL_FACTOR}, got {h}x{w}")));
        }
        if t == 0 || t % TEMPORAL_FACTOR != 0 {
            return Err(Error::shape(format!("T must be divisible by {TEMPORAL_FACTOR}, got {t}")));
        }
        let (h8, w8) = (h / SPATIAL_FACTOR, w / SPATIAL_FACTOR);
        Ok(DerivedShapes {
            z1: [self.z1_channels(), t, h8, w8],
            z2: [self.latent_channels_z2, t / TEMPORAL_FACTOR, h8, w8],
        })
    }

    /// Stable identifier of this config (FNV-1a over its canonical JSON).
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_channel_default_accepted() {
        let cfg = ModelConfig { latent_channels_z2: 16, ..Default::default() }.validate().unwrap();
        assert_eq!(cfg.patch_sizes, vec![8, 4, 2, 1]);
        assert_eq!(cfg.latent_channels_z1, Some(16));
    }

    #[test]
    fn short_multiplier_list_rejected() {
        let err = ModelConfig { channel_multipliers: vec![1, 2, 2], ..Default::default() }.validate().unwrap_err();
        assert!(alloc::format!("{err}").contains("channel_multipliers must have 4 entries"));
    }

    #[test]
    fn negative_loss_weight_rejected() {
        let err = ModelConfig { lambda_kl: -0.1, ..Default::default() }.validate().unwrap_err();
        assert!(alloc::format!("{err}").contains("loss weights must be ≥ 0"));
        assert!(matches!(err, Error::Config { field: "lambda_kl", .. }));
    }

    #[test]
    fn validation_is_idempotent() {
        let once = ModelConfig { variant: Variant::Sequential, ..Default::default() }.validate().unwrap();
        assert_eq!(once.validate().unwrap(), once);
    }

    #[test]
    fn unknown_json_keys_rejected() {
        assert!(ModelConfig::from_json(r#"{"base_channel": 8}"#).is_err());
        let c = ModelConfig::from_json(r#"{"base_channels": 8}"#).unwrap();
        assert_eq!(c.base_channels, 8);
        assert_eq!(c.latent_channels_z2, 4);
    }

    #[test]
    fn parity_mode_restricts_kernels_and_channels() {
        let base = ModelConfig { paper_parity: true, ..Default::default() };
        assert!(base.validate().is_ok());
        assert!(ModelConfig { temporal_kernel: [1, 3, 3], ..base.clone() }.validate().is_err());
        assert!(ModelConfig { latent_channels_z2: 8, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { latent_channels_z2: 8, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn derived_shapes_follow_factors() {
        let cfg = ModelConfig::default().validate().unwrap();
        let d = cfg.derived_shapes(&[3, 16, 64, 64]).unwrap();
        assert_eq!(d.z1, [4, 16, 8, 8]);
        assert_eq!(d.z2, [4, 4, 8, 8]);
        assert!(cfg.derived_shapes(&[3, 6, 64, 64]).is_err());
        assert!(cfg.derived_shapes(&[3, 4, 60, 64]).is_err());
    }
}
