//! Benchmark fixtures shared by the criterion targets.

use morvit_core::data::synth_mixed_difficulty;
use morvit_core::{preset, ModelConfig, MorVit, RoutingMode, Tensor};

/// Freshly initialized `desk` model in the given routing mode.
pub fn desk_model(mode: RoutingMode) -> MorVit {
    let cfg = ModelConfig {
        routing_mode: mode,
        ..preset("desk").expect("built-in preset").model
    };
    MorVit::new(cfg).expect("valid preset")
}

/// A fixed batch of synthetic images in the `desk` geometry.
pub fn desk_batch(n: usize) -> Vec<Tensor> {
    let cfg = preset("desk").expect("built-in preset").model;
    synth_mixed_difficulty(n, 0, &cfg, 0.5).expect("valid spec").images()
}
