//! Fixtures shared by the benchmarks.

use psg_core::data::synthetic::synthetic_triplets;
use psg_core::data::Triplet;
use psg_core::illumination::IlluminationEstimatorConfig;
use psg_core::pipeline::TrainConfig;
use psg_core::restorer::RestorerConfig;

/// The compact model used for smoke-scale training runs.
pub fn small_config(image_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        image_size,
        ..TrainConfig::default()
    };
    cfg.model.illumination = IlluminationEstimatorConfig {
        scales: vec![4, 8, 16],
        embed_dim: 32,
        attention_heads: 4,
    };
    cfg.model.restorer = RestorerConfig {
        base_channels: 16,
        depth: 2,
        share_branch_weights: false,
        attention_heads: 2,
    };
    cfg.model.itss_patch = 16;
    cfg
}

pub fn triplet(size: usize) -> Triplet {
    synthetic_triplets(1, size, 0).expect("synthetic triplet").remove(0)
}
