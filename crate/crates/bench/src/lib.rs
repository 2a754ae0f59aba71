//! Shared inputs for the benchmarks.

use std::sync::Arc;

use mmb_core::imagefeat::{synth_features, FeatureKind};
use mmb_core::model::{Fusion, ModelConfig};
use mmb_core::textdata::{Example, NUM_RESERVED};

/// Desk preset with the given fusion over a 2000-token vocabulary.
pub fn desk(fusion: Fusion, kind: FeatureKind) -> ModelConfig {
    ModelConfig::desk(2000).with_fusion(fusion, kind)
}

/// `n` deterministic examples with 40-token contexts and 16-token labels.
pub fn examples(n: usize, kind: FeatureKind) -> Vec<Example> {
    (0..n as u32)
        .map(|i| Example {
            input: (0..40).map(|j| NUM_RESERVED as u32 + (i * 37 + j * 11) % 1900).collect(),
            label: (0..16).map(|j| NUM_RESERVED as u32 + (i * 13 + j * 7) % 1900).collect(),
            image: Some(Arc::new(synth_features(&format!("bench{i}"), kind, 0))),
        })
        .collect()
}
