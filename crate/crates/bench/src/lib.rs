//! Fixtures shared by the benchmarks: a default-size model and a batch of
//! phantom pairs.

use acdae_core::networks::init_parameters;
use acdae_core::phantom::{build_pairs, generate_dataset};
use acdae_core::{Config, ModelParameters, PairSample};

/// Config used by every benchmark: default architecture at the base width
/// the acceptance runs train with.
pub fn bench_config() -> Config {
    let mut c = Config::default();
    c.model.base_channels = 16;
    c.data.train_subjects = 4;
    c.data.test_subjects = 0;
    c.train.batch_size = 16;
    c
}

pub fn bench_pairs(c: &Config) -> Vec<PairSample> {
    let (train, _) = generate_dataset(&c.data).expect("valid phantom config");
    build_pairs(&train, c.data.pairing, &c.data, c.model.age_bins).expect("valid subjects")
}

pub fn bench_params(c: &Config) -> ModelParameters<f32> {
    init_parameters(&c.model, 0).expect("valid model config")
}
