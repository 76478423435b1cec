//! Training loops for the autoencoders, the feature extractor and the latent
//! generator, plus optimizer, checkpoint and log plumbing.
//!
//! Every random draw of step `s` comes from a stream keyed by `(seed, tag, s)`,
//! so a run resumed from a checkpoint replays the uninterrupted run exactly.

pub mod checkpoint;
pub mod features;
pub mod latent_gen;
pub mod log;
pub mod model;
pub mod optim;
pub mod trainer;

pub use checkpoint::{file_hash, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CheckpointMeta};
pub use features::{load_or_train_features, train_feature_extractor};
pub use latent_gen::{LatentGenerator, LatentGenReport};
pub use log::{LogWindow, StepRecord, TRAIN_LOG_HEADER};
pub use model::{Autoencoder, DecoderNet};
pub use optim::{adamw_update, clip_gradients, global_norm, lr_at, lr_schedule, OptimizerState};
pub use trainer::{evaluate_reconstruction, Trainer};

use std::path::Path;

use rand::Rng;

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::nets::{Bound, ModelParams};
use crate::rng;

/// `batch` distinct indices from `0..n` drawn from stream `(seed, tag, step)`.
pub fn sample_indices(seed: u64, tag: &str, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let batch = batch.min(n);
    let mut r = rng::stream(seed, tag, step);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..batch {
        let j = r.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(batch);
    idx
}

/// Gradients of every bound parameter, zero where the loss does not depend on it.
pub(crate) fn collect_grads(params: &ModelParams, bound: &Bound, grads: &mut Grads<f32>) -> Result<ModelParams> {
    let mut out = ModelParams::new();
    for (name, t) in params.iter() {
        let v = bound.get(name)?;
        out.insert(name.clone(), grads.take(v).unwrap_or_else(|| t.zeros_like_tensor()))?;
    }
    Ok(out)
}

pub const HASHES_FILE: &str = "HASHES";

/// Write `sha256  name` for every file in `dir`, sorted by name.
pub fn write_hashes(dir: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != HASHES_FILE && !n.starts_with('.'))
        .collect();
    names.sort();
    let mut text = String::new();
    for n in names {
        text.push_str(&format!("{}  {n}\n", file_hash(&dir.join(&n))?));
    }
    write_atomic(&dir.join(HASHES_FILE), text.as_bytes())
}
