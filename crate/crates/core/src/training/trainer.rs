use std::path::{Path, PathBuf};

use log::{info, warn};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::features::{features_from_checkpoint, put_features_meta};
use super::log::{append_rows, LogWindow, StepRecord, TRAIN_LOG_HEADER};
use super::model::{Autoencoder, DecoderNet};
use super::optim::{adamw_update, clip_gradients, lr_at, OptimizerState};
use super::{collect_grads, sample_indices};
use crate::autograd::Graph;
use crate::config::{ModelKind, RunConfig};
use crate::data::{augment_train, preprocess_eval, Dataset, ImageBatch};
use crate::diffusion::{forward_noise, predict_x0_graph, velocity_target, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{
    dsm_graph, hinge_d_graph, hinge_g_graph, kl_graph, l2_graph, perceptual_graph, unit_weight, weighted_sum,
    TERM_DSM, TERM_GAN_D, TERM_GAN_G, TERM_KL, TERM_LPIPS, TERM_REC,
};
use crate::metrics::{eval_indices, frechet_feature_distance, latent_total_variation, psnr, ssim, EvalReport};
use crate::nets::{Architecture, Discriminator, FeatureExtractor, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

/// Discriminator loss below this counts towards a collapse warning.
pub const COLLAPSE_LOSS: f64 = 1e-4;
/// Consecutive collapsed discriminator updates before warning.
pub const COLLAPSE_UPDATES: u64 = 500;

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

struct DiscState {
    net: Discriminator,
    params: ModelParams,
    opt: OptimizerState,
    collapsed_run: u64,
}

/// Step-by-step trainer for either autoencoder.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Autoencoder,
    pub fx: FeatureExtractor,
    pub step: u64,
    opt: OptimizerState,
    disc: Option<DiscState>,
    window: LogWindow,
    out_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, fx: FeatureExtractor) -> Result<Self> {
        cfg.validate()?;
        if cfg.loss.eta > 0.0 {
            fx.require_trained()?;
        }
        let model = Autoencoder::new(cfg)?;
        let opt = OptimizerState::new(&model.params, &cfg.optim);
        let disc = if cfg.model == ModelKind::Baseline && cfg.loss.lambda > 0.0 {
            let net = Discriminator::new(cfg.disc.scale, "disc");
            let params = net.init(rng::derive_seed(cfg.seeds.global, "disc_init", 0))?;
            let opt = OptimizerState::new(&params, &cfg.optim);
            Some(DiscState {
                net,
                params,
                opt,
                collapsed_run: 0,
            })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            fx,
            step: 0,
            opt,
            disc,
            window: LogWindow::default(),
            out_dir: None,
            last_checkpoint: None,
        })
    }

    /// Write the CSV log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.optim.total_steps
    }

    /// One optimizer step on the batch drawn for the current step index.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::config("optim.total_steps", format!("run already finished at step {}", self.step)));
        }
        let s = self.step;
        let lr = lr_at(&self.cfg.optim, s)?;
        let x = self.training_batch(dataset, s)?;
        let mut rec = match self.model.kind {
            ModelKind::Dgae => self.dgae_step(&x, s, lr)?,
            ModelKind::Baseline => self.baseline_step(&x, s, lr)?,
        };
        if !rec.total.is_finite() || rec.terms.values().any(|v| !v.is_finite()) {
            let last = self
                .last_checkpoint
                .as_ref()
                .map_or("none written yet".to_string(), |p| p.display().to_string());
            return Err(Error::Numeric {
                message: format!("non-finite loss at step {}; last good checkpoint: {last}", s + 1),
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        if !self.model.params.all_finite() {
            return Err(Error::numeric(format!("non-finite parameters after step {}", s + 1)));
        }
        self.step = s + 1;
        rec.step = self.step;
        self.window.push(&rec);
        if let Some(dir) = self.out_dir.clone() {
            if self.step % self.cfg.log_every == 0 || self.is_done() {
                append_rows(&dir.join(LOG_FILE), TRAIN_LOG_HEADER, &[self.window.row(self.step, lr)])?;
                info!("step {} {}", self.step, self.window.row(self.step, lr));
                self.window = LogWindow::default();
            }
            if self.step % self.cfg.checkpoint_every == 0 || self.is_done() {
                let path = dir.join(LAST_CHECKPOINT);
                save_checkpoint(&self.checkpoint(), &path)?;
                self.last_checkpoint = Some(path);
            }
        }
        Ok(rec)
    }

    /// Train until `total_steps`, returning the per-step records of this call.
    pub fn run(&mut self, dataset: &Dataset) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.train_step(dataset)?);
        }
        Ok(out)
    }

    pub fn run_steps(&mut self, dataset: &Dataset, n: u64) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            out.push(self.train_step(dataset)?);
        }
        Ok(out)
    }

    fn training_batch(&self, dataset: &Dataset, s: u64) -> Result<ImageBatch> {
        let seed = self.cfg.seeds.global;
        let idx = sample_indices(seed, "batch", s, dataset.len(), self.cfg.optim.batch_size);
        let (x, _, _) = dataset.batch(&idx);
        augment_train(&x, self.cfg.crop_size, &mut rng::stream(seed, "aug", s))
    }

    fn times(&self, s: u64, n: usize) -> Vec<f64> {
        let t_min = self.cfg.t_min;
        let mut r = rng::stream(self.cfg.seeds.global, "t", s);
        (0..n).map(|_| t_min + (1.0 - t_min) * rng::uniform(&mut r)).collect()
    }

    fn dgae_step(&mut self, x: &ImageBatch, s: u64, lr: f64) -> Result<StepRecord> {
        let seed = self.cfg.seeds.global;
        let w = self.cfg.loss;
        let DecoderNet::Diffusion(unet) = &self.model.decoder else {
            return Err(Error::structure("unet", "diffusion step on a Gaussian decoder"));
        };
        let n = x.dim(0);
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let post = self.model.encoder.forward(&mut g, &p, xv)?;
        let zshape = g.shape(post.mu).to_vec();
        let znoise = rng::normal_tensor(&mut rng::stream(seed, "z", s), &zshape);
        let z = crate::nets::reparameterize_graph(&mut g, &post, znoise)?;
        let cond = g.upsample_nearest(z, self.model.downsample())?;
        let t = self.times(s, n);
        let eps: Tensor<f32> = rng::normal_tensor(&mut rng::stream(seed, "eps", s), x.shape());
        let x_t = forward_noise(x, &eps, &t)?;
        let target = g.constant(velocity_target(x, &eps)?);
        let xtv = g.constant(x_t);
        let v = unet.forward(&mut g, &p, xtv, &t, cond)?;
        let dsm = dsm_graph(&mut g, v, target, &t, unit_weight)?;
        let kl = kl_graph(&mut g, post.mu, post.logvar)?;
        let mut terms = vec![(dsm, w.alpha), (kl, w.beta)];
        let mut names = vec![TERM_DSM, TERM_KL];
        if w.eta > 0.0 {
            let x0p = predict_x0_graph(&mut g, xtv, &t, v)?;
            let fb = self.fx.params.bind(&mut g, false);
            let lp = perceptual_graph(&mut g, &self.fx.net(), &fb, x0p, xv)?;
            terms.push((lp, w.eta));
            names.push(TERM_LPIPS);
        }
        let total = weighted_sum(&mut g, &terms)?;
        let mut grads = g.backward(total)?;
        let mut gp = collect_grads(&self.model.params, &p, &mut grads)?;
        clip_gradients(&mut gp, self.cfg.optim.grad_clip)?;
        adamw_update(&mut self.model.params, &gp, &mut self.opt, lr)?;
        Ok(StepRecord {
            step: s + 1,
            lr,
            total: g.value(total).item() as f64,
            terms: names
                .iter()
                .zip(&terms)
                .map(|(k, (v, _))| (k.to_string(), g.value(*v).item() as f64))
                .collect(),
        })
    }

    fn baseline_step(&mut self, x: &ImageBatch, s: u64, lr: f64) -> Result<StepRecord> {
        let seed = self.cfg.seeds.global;
        let w = self.cfg.loss;
        let DecoderNet::Gaussian(dec) = &self.model.decoder else {
            return Err(Error::structure("dec", "Gaussian step on a diffusion decoder"));
        };
        let gan_on = self.disc.is_some() && s >= self.cfg.disc.start_step;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let post = self.model.encoder.forward(&mut g, &p, xv)?;
        let zshape = g.shape(post.mu).to_vec();
        let znoise = rng::normal_tensor(&mut rng::stream(seed, "z", s), &zshape);
        let z = crate::nets::reparameterize_graph(&mut g, &post, znoise)?;
        let xh = dec.forward(&mut g, &p, z)?;
        let rec = l2_graph(&mut g, xv, xh)?;
        let kl = kl_graph(&mut g, post.mu, post.logvar)?;
        let mut terms = vec![(rec, w.alpha), (kl, w.beta)];
        let mut names = vec![TERM_REC, TERM_KL];
        if w.eta > 0.0 {
            let fb = self.fx.params.bind(&mut g, false);
            let lp = perceptual_graph(&mut g, &self.fx.net(), &fb, xh, xv)?;
            terms.push((lp, w.eta));
            names.push(TERM_LPIPS);
        }
        if gan_on {
            let d = self.disc.as_ref().expect("gan_on implies a discriminator");
            let dp = d.params.bind(&mut g, false);
            let logits = d.net.forward(&mut g, &dp, xh)?;
            terms.push((hinge_g_graph(&mut g, logits), w.lambda));
            names.push(TERM_GAN_G);
        }
        let total = weighted_sum(&mut g, &terms)?;
        let mut grads = g.backward(total)?;
        let mut gp = collect_grads(&self.model.params, &p, &mut grads)?;
        clip_gradients(&mut gp, self.cfg.optim.grad_clip)?;
        adamw_update(&mut self.model.params, &gp, &mut self.opt, lr)?;
        let mut rec = StepRecord {
            step: s + 1,
            lr,
            total: g.value(total).item() as f64,
            terms: names
                .iter()
                .zip(&terms)
                .map(|(k, (v, _))| (k.to_string(), g.value(*v).item() as f64))
                .collect(),
        };
        if gan_on && s % self.cfg.disc.update_interval == 0 {
            let fake = g.value(xh).clone();
            let d_loss = self.disc_update(x, fake, lr)?;
            rec.terms.insert(TERM_GAN_D.into(), d_loss);
        }
        Ok(rec)
    }

    fn disc_update(&mut self, real: &ImageBatch, fake: ImageBatch, lr: f64) -> Result<f64> {
        let clip = self.cfg.optim.grad_clip;
        let d = self.disc.as_mut().expect("discriminator present");
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, true);
        let rv = g.constant(real.clone());
        let fv = g.constant(fake);
        let lr_logits = d.net.forward(&mut g, &p, rv)?;
        let lf_logits = d.net.forward(&mut g, &p, fv)?;
        let loss = hinge_d_graph(&mut g, lr_logits, lf_logits);
        let mut grads = g.backward(loss)?;
        let mut gp = collect_grads(&d.params, &p, &mut grads)?;
        clip_gradients(&mut gp, clip)?;
        adamw_update(&mut d.params, &gp, &mut d.opt, lr)?;
        let v = g.value(loss).item() as f64;
        if v < COLLAPSE_LOSS {
            d.collapsed_run += 1;
            if d.collapsed_run == COLLAPSE_UPDATES {
                warn!(
                    "discriminator loss below {COLLAPSE_LOSS} for {COLLAPSE_UPDATES} consecutive updates (step {}): likely collapse",
                    self.step + 1
                );
            }
        } else {
            d.collapsed_run = 0;
        }
        Ok(v)
    }

    /// Consecutive collapsed discriminator updates so far.
    pub fn collapse_run(&self) -> u64 {
        self.disc.as_ref().map_or(0, |d| d.collapsed_run)
    }

    pub fn discriminator_params(&self) -> Option<&ModelParams> {
        self.disc.as_ref().map(|d| &d.params)
    }

    /// Full training state: weights, optimizer moments, log window and feature extractor.
    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = &self.cfg;
        let mut c = Checkpoint::new(cfg.model.name(), &cfg.to_config_text(), &cfg.hash(), self.step, cfg.seeds.global);
        c.put_params("model", &self.model.params);
        c.put_params("opt.m", &self.opt.m);
        c.put_params("opt.v", &self.opt.v);
        c.set_extra("opt.step", self.opt.step);
        if let Some(d) = &self.disc {
            c.put_params("disc", &d.params);
            c.put_params("disc.m", &d.opt.m);
            c.put_params("disc.v", &d.opt.v);
            c.set_extra("disc.opt_step", d.opt.step);
            c.set_extra("disc.collapsed_run", d.collapsed_run);
        }
        c.put_params("feat", &self.fx.params);
        put_features_meta(&mut c, &self.fx);
        c.set_extra("log.window", &self.window);
        c
    }

    /// Continue a run from `ckpt`; `cfg` must hash to the checkpoint's config.
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.config_hash != cfg.hash() {
            return Err(Error::config(
                "config",
                format!(
                    "checkpoint was written by config {} but this config hashes to {}",
                    ckpt.meta.config_hash,
                    cfg.hash()
                ),
            ));
        }
        let fx = features_from_checkpoint(ckpt)?;
        let mut me = Self::new(cfg, fx)?;
        me.model = Autoencoder::from_params(cfg, ckpt.params("model")?)?;
        me.opt.m = ckpt.params("opt.m")?;
        me.opt.v = ckpt.params("opt.v")?;
        me.opt.step = ckpt.extra("opt.step")?;
        if let Some(d) = me.disc.as_mut() {
            d.params = ckpt.params("disc")?;
            d.params.check_against(&d.net.inventory().specs)?;
            d.opt.m = ckpt.params("disc.m")?;
            d.opt.v = ckpt.params("disc.v")?;
            d.opt.step = ckpt.extra("disc.opt_step")?;
            d.collapsed_run = ckpt.extra("disc.collapsed_run")?;
        }
        me.window = ckpt.extra("log.window")?;
        me.step = ckpt.meta.step;
        Ok(me)
    }
}

/// Autoencoder weights and feature extractor from a training checkpoint.
pub fn load_trained(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(Autoencoder, FeatureExtractor)> {
    if ckpt.meta.kind != cfg.model.name() {
        return Err(Error::config(
            "model",
            format!("checkpoint holds a `{}` model but the config asks for `{}`", ckpt.meta.kind, cfg.model.name()),
        ));
    }
    let model = Autoencoder::from_params(cfg, ckpt.params("model")?)?;
    let fx = features_from_checkpoint(ckpt)?;
    Ok((model, fx))
}

/// Reconstruction metrics over the seed-selected evaluation subset, encoding with the posterior mean.
pub fn evaluate_reconstruction(
    model: &Autoencoder,
    cfg: &RunConfig,
    eval_set: &Dataset,
    fx: &FeatureExtractor,
    sampler: &SamplerConfig,
    checkpoint_hash: &str,
    step: u64,
) -> Result<EvalReport> {
    fx.require_trained()?;
    let idx = eval_indices(eval_set.len(), cfg.eval_count, cfg.seeds.eval);
    let (x, _, _) = eval_set.batch(&idx);
    let x = preprocess_eval(&x, cfg.crop_size)?;
    let (z, xh) = model.reconstruct(&x, sampler, 0)?;
    let (_, psnr_mean) = psnr(&x, &xh)?;
    let (_, ssim_mean) = ssim(&x, &xh)?;
    let frechet_distance = frechet_feature_distance(&x, &xh, fx)?;
    let latent_tv = latent_total_variation(&z)?;
    let report = EvalReport {
        model: cfg.model.name().into(),
        psnr_mean,
        ssim_mean,
        frechet_distance,
        latent_tv,
        num_images: idx.len(),
        checkpoint_hash: checkpoint_hash.into(),
        config_hash: cfg.hash(),
        sampler_steps: match cfg.model {
            ModelKind::Dgae => sampler.num_steps,
            ModelKind::Baseline => 0,
        },
        eval_seed: cfg.seeds.eval,
        step,
    };
    report.validate()?;
    Ok(report)
}
