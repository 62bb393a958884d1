//! Shared fixtures for the benchmarks.

use evobox::data::{generate_scene, Sample, SceneSpec};
use evobox::model::{FusionMode, ModelConfig};

/// Desk-preset scenes starting at a fixed index outside typical training
/// ranges.
pub fn desk_scenes(n: u64) -> Vec<Sample> {
    (0..n).map(|i| generate_scene(&SceneSpec::desk(), 50_000 + i)).collect()
}

/// The desk model with and without multi-layer fusion (the Table-2 style
/// ablation pair).
pub fn fusion_pair() -> [(&'static str, ModelConfig); 2] {
    [
        ("fusion", ModelConfig::desk()),
        ("no-fusion", ModelConfig { fusion_mode: FusionMode::LastLayerOnly, ..ModelConfig::desk() }),
    ]
}
