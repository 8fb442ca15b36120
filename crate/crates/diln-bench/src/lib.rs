//! Shared fixtures for the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diln_core::data::{generate_synthetic, RankingSample, SyntheticConfig};
use diln_core::gsu::SearchConfig;
use diln_core::histogram::{materialize_histograms, SearchMode};
use diln_core::ilem::{Codebook, CodebookConfig};
use diln_core::model::{Batch, DilnModel, ModelConfig};
use diln_core::nn::ParamStore;
use diln_core::training::init_codebook;

/// A prepared desk-scale dataset slice with histograms filled in.
pub fn prepared_samples(users: usize, seed: u64) -> Vec<RankingSample> {
    let cfg = SyntheticConfig {
        users,
        categories: 20,
        categories_per_user: 5,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let window_end = cfg.window_days as i64;
    let feature_events: Vec<_> =
        data.events.iter().filter(|e| e.date_key() <= window_end).copied().collect();
    let mut samples = data.samples;
    materialize_histograms(
        &mut samples,
        &feature_events,
        SearchMode::Hard,
        &SearchConfig::default(),
        20,
        1,
    )
    .unwrap();
    samples
}

/// Model, parameters and a ready codebook over a sample batch.
pub fn model_fixture(samples: &[RankingSample], seed: u64) -> (DilnModel, ParamStore, Codebook, Batch) {
    let model = DilnModel::new(ModelConfig::default()).unwrap();
    let store = model.init_params(seed);
    let refs: Vec<&RankingSample> = samples.iter().take(256).collect();
    let batch = Batch::from_samples(&refs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = init_codebook(
        &model,
        &store,
        &batch,
        CodebookConfig { clusters: 10, code_dim: 16, ..Default::default() },
        &mut rng,
    );
    (model, store, cb, batch)
}

/// Random scores and labels for metric benchmarks.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
    (scores, labels)
}
