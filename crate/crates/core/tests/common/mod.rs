#![allow(dead_code)]

use std::path::PathBuf;

use dgae_core::data::generate_procedural_dataset;
use dgae_core::nets::{FeatureExtractor, ParamStore};
use dgae_core::training::train_feature_extractor;
use dgae_core::{Dataset, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// `configs/tiny.cfg` for `model` with extra `key=value` overrides.
pub fn tiny_config(model: &str, extra: &[&str]) -> RunConfig {
    let mut o = vec![format!("model={model}")];
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(&configs_dir().join("tiny.cfg"), &o).expect("tiny config parses")
}

pub struct Setup {
    pub train: Dataset,
    pub eval: Dataset,
    pub fx: FeatureExtractor,
}

pub fn setup(cfg: &RunConfig) -> Setup {
    let train = generate_procedural_dataset(&cfg.dataset).unwrap();
    let eval = generate_procedural_dataset(&cfg.eval_dataset_spec()).unwrap();
    let fx = train_feature_extractor(cfg, &train).unwrap();
    Setup { train, eval, fx }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn uniform32(shape: &[usize], lo: f32, hi: f32, r: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Shift every parameter by `U(-amp, amp)` so zero-initialized layers carry signal.
pub fn jitter(p: &ParamStore<f64>, amp: f64, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-amp..amp);
        }
    }
    out
}
