#![allow(dead_code)]

use psg_core::data::synthetic::synthetic_triplets;
use psg_core::data::Triplet;
use psg_core::illumination::IlluminationEstimatorConfig;
use psg_core::pipeline::TrainConfig;
use psg_core::restorer::RestorerConfig;
use psg_core::text_align::TextAlignConfig;

/// A model small enough to train for a few steps inside a unit test.
pub fn tiny_config(image_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        image_size,
        epochs: 2,
        batch_size: 2,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.model.illumination = IlluminationEstimatorConfig {
        scales: vec![4, 8],
        embed_dim: 8,
        attention_heads: 2,
    };
    cfg.model.aligner = TextAlignConfig {
        embed_dim: 32,
        patch_size: 8,
        patch_width: 16,
        layers: 1,
        heads: 4,
        ffn_dim: 32,
    };
    cfg.model.restorer = RestorerConfig {
        base_channels: 4,
        depth: 2,
        share_branch_weights: false,
        attention_heads: 2,
    };
    cfg.model.itss_patch = 8;
    cfg
}

/// Synthetic triplets with varied scene descriptions.
pub fn triplets(count: usize, size: usize, seed: u64) -> Vec<Triplet> {
    synthetic_triplets(count, size, seed).unwrap()
}
