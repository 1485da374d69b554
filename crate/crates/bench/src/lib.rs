//! Benchmark fixtures shared by the criterion targets.

use saliency_core::model::{Modality, ModelConfig};

/// Mid-sized model used for forward-pass timings.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        side: 64,
        c: 32,
        d: 64,
        encoder_layers: 1,
        convertor_layers: 2,
        decoder_layers: [1, 1, 1],
        modality: Modality::Rgb,
        heads: 2,
        encoder_heads: 1,
        ffn_ratio: 4,
        seed: 7,
    }
}
