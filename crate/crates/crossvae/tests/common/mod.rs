#![allow(dead_code)]

use std::path::{Path, PathBuf};

use crossvae::dataset::{generate_dataset, Dataset, DatasetTemplate};
use crossvae_core::ModelConfig;

/// A model small enough for a few training steps per test.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 1, 2, 2],
        temporal_channels: 8,
        disc_channels: 4,
        temporal_kernel: [3, 1, 1],
        learning_rate: 1e-3,
        gan_warmup_steps: 2,
        video_image_ratio: [2, 1],
        train_steps: 6,
        ..Default::default()
    }
}

pub fn small_dataset(root: &Path, name: &str, n: usize, seed: u64) -> (PathBuf, Dataset) {
    let dir = root.join(name);
    generate_dataset(&dir, &DatasetTemplate::new(8, 16, 16), n, seed).unwrap();
    let ds = Dataset::open(&dir).unwrap();
    (dir, ds)
}
