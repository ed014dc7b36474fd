//! Shared fixtures for the benchmarks.

use ifam_core::databench::{generate, DatasetSpec, GroupedDataset};
use ifam_core::model::{IfamConfig, IfamModel};
use ifam_core::vit::ModelConfig;
use ifam_core::Rng;

/// The desk-scale model: 32 px images, 4 px patches, two layers.
pub fn desk_config() -> IfamConfig {
    IfamConfig {
        model: ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2,
            n_registers: 1,
            n_classes: 2,
            n_parts: 2,
        },
        ..IfamConfig::default()
    }
}

pub fn desk_model() -> IfamModel {
    IfamModel::new(desk_config(), &mut Rng::new(0)).expect("valid config")
}

pub fn small_dataset() -> GroupedDataset {
    generate(&DatasetSpec {
        n_classes: 2,
        n_train: 64,
        n_val: 16,
        n_test: 16,
        ..DatasetSpec::default()
    })
    .expect("valid spec")
}
