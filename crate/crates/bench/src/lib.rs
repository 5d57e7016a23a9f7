//! Shared fixtures for the criterion benches.

use rg_core::train::{Example, Model};
use rg_core::{generate_dataset, DatasetSpec, RunConfig, Tensor};

/// The default architecture with seeded initial weights.
pub fn default_model() -> Model {
    let mut m = RunConfig::default().architecture.build().unwrap();
    m.init(0);
    m
}

/// `n` synthetic examples matched to `model`'s finest heatmap.
pub fn examples(model: &Model, n: usize) -> Vec<Example> {
    let data = generate_dataset(&DatasetSpec {
        n_samples: n,
        ..RunConfig::default().data
    })
    .unwrap();
    let dims = model.output_dims(model.heads.num_scales());
    data.samples
        .iter()
        .map(|s| Example::from_sample(s, dims, 1.0).unwrap())
        .collect()
}

/// Deterministic pseudo-random fill in `[-1, 1)`, no RNG crate needed.
pub fn filled(mut t: Tensor, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    for v in t.data_mut() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
    }
    t
}
