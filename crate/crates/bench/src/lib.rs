//! Shared fixtures for the benchmarks.

use scenegen::scene::{generate_toy_dataset, ToyRuleSpec};
use scenegen::{Model, ModelConfig, Real, Scene};

pub fn toy_scenes(n: usize) -> Vec<Scene> {
    generate_toy_dataset(&ToyRuleSpec::default(), n)
        .expect("default spec is valid")
        .scenes
}

/// Default architecture over the toy categories.
pub fn toy_model<S: Real>(octaves: usize) -> Model<S> {
    let mut config = ModelConfig::with_categories(ToyRuleSpec::default().category_names());
    config.octaves = octaves;
    Model::new(config, 0).expect("default config is valid")
}
