use std::path::Path;

use log::info;
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::optim::{adamw_update, OptimizerState};
use super::{collect_grads, sample_indices};
use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{hex, Dataset};
use crate::error::{Error, Result};
use crate::nets::features::FEATURE_WIDTHS;
use crate::nets::{Architecture, FeatureExtractor, FeatureNet};

pub const FEATURES_KIND: &str = "features";

/// Identity of a feature extractor: the dataset and its training settings.
pub fn features_key(cfg: &RunConfig) -> String {
    let text = format!(
        "{}\n{}\n{}\n{}\n{}\n{}\n{}\n{}\n{}\n{:?}\n",
        cfg.dataset.num_images,
        cfg.dataset.image_size,
        cfg.dataset.num_shape_classes,
        cfg.dataset.num_color_classes,
        cfg.dataset.texture_octaves,
        cfg.seeds.data,
        cfg.features.train_steps,
        cfg.features.batch_size,
        cfg.features.lr,
        FEATURE_WIDTHS,
    );
    hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Train the shape/colour classifier with cross-entropy on both heads.
///
/// Depends only on the dataset and `features.*`, so every run on the same
/// data shares one extractor.
pub fn train_feature_extractor(cfg: &RunConfig, dataset: &Dataset) -> Result<FeatureExtractor> {
    let net = FeatureNet::new(cfg.dataset.num_shape_classes, cfg.dataset.num_color_classes);
    let seed = cfg.seeds.data;
    let mut params = net.init(seed)?;
    let optim = crate::config::OptimConfig {
        weight_decay: 0.0,
        ..cfg.optim.clone()
    };
    let mut state = OptimizerState::new(&params, &optim);
    let bs = cfg.features.batch_size.min(dataset.len());
    for step in 0..cfg.features.train_steps {
        let idx = sample_indices(seed, "feat_batch", step, dataset.len(), bs);
        let (x, shapes, colors) = dataset.batch(&idx);
        let x = crate::data::preprocess_eval(&x, cfg.crop_size)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &p, xv)?;
        let ls = g.softmax_cross_entropy(out.shape_logits, &shapes)?;
        let lc = g.softmax_cross_entropy(out.color_logits, &colors)?;
        let loss = g.add(ls, lc)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::numeric(format!("feature extractor loss is {lv} at step {step}")));
        }
        let mut grads = g.backward(loss)?;
        let gs = collect_grads(&params, &p, &mut grads)?;
        adamw_update(&mut params, &gs, &mut state, cfg.features.lr)?;
        if (step + 1) % 500 == 0 {
            info!("feature extractor step {} loss {lv:.4}", step + 1);
        }
    }
    Ok(FeatureExtractor {
        widths: FEATURE_WIDTHS,
        num_shape_classes: cfg.dataset.num_shape_classes,
        num_color_classes: cfg.dataset.num_color_classes,
        params,
        trained_steps: cfg.features.train_steps,
    })
}

pub fn features_checkpoint(fx: &FeatureExtractor, key: &str) -> Checkpoint {
    let mut c = Checkpoint::new(FEATURES_KIND, "", key, fx.trained_steps, 0);
    c.put_params("feat", &fx.params);
    put_features_meta(&mut c, fx);
    c
}

pub(crate) fn put_features_meta(c: &mut Checkpoint, fx: &FeatureExtractor) {
    c.set_extra("features.trained_steps", fx.trained_steps);
    c.set_extra("features.widths", fx.widths);
    c.set_extra("features.shape_classes", fx.num_shape_classes);
    c.set_extra("features.color_classes", fx.num_color_classes);
}

/// Feature extractor stored in `c` under the `feat/` group.
pub fn features_from_checkpoint(c: &Checkpoint) -> Result<FeatureExtractor> {
    let fx = FeatureExtractor {
        widths: c.extra("features.widths")?,
        num_shape_classes: c.extra("features.shape_classes")?,
        num_color_classes: c.extra("features.color_classes")?,
        params: c.params("feat")?,
        trained_steps: c.extra("features.trained_steps")?,
    };
    fx.params.check_against(&fx.net().inventory().specs)?;
    Ok(fx)
}

/// Load the extractor cached in `dir` for this dataset, training and caching it if absent.
pub fn load_or_train_features(cfg: &RunConfig, dataset: &Dataset, dir: &Path) -> Result<FeatureExtractor> {
    let key = features_key(cfg);
    let path = dir.join(format!("features-{key}.ckpt"));
    if path.exists() {
        let c = load_checkpoint(&path)?;
        if c.meta.kind == FEATURES_KIND && c.meta.config_hash == key {
            return features_from_checkpoint(&c);
        }
    }
    info!("training feature extractor for {} steps", cfg.features.train_steps);
    let fx = train_feature_extractor(cfg, dataset)?;
    save_checkpoint(&features_checkpoint(&fx, &key), &path)?;
    Ok(fx)
}
