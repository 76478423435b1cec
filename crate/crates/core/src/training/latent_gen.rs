//! Unconditional flow-matching generator over autoencoder latents.
//!
//! Latents are posterior means of centre-cropped training images, standardized
//! per channel. The mixer learns the velocity `eps - z` on the same linear path
//! the pixel decoder uses, and samples are integrated with plain Euler steps.

use std::path::Path;

use log::info;

use super::checkpoint::Checkpoint;
use super::log::append_rows;
use super::model::Autoencoder;
use super::optim::{adamw_update, clip_gradients, OptimizerState};
use super::{collect_grads, sample_indices};
use crate::autograd::Graph;
use crate::config::{OptimConfig, RunConfig};
use crate::data::{preprocess_eval, Dataset};
use crate::diffusion::{forward_noise, velocity_target};
use crate::error::{Error, Result};
use crate::losses::{dsm_graph, unit_weight};
use crate::metrics::{eval_indices, frechet_feature_distance};
use crate::nets::{Architecture, FeatureExtractor, MixerNet, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

pub const CONVERGENCE_HEADER: &str = "latent_size,seed,step,frechet";
pub const STD_EPS: f64 = 1e-8;

/// Fréchet distance of decoded samples at each evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGenReport {
    pub latent_size: usize,
    pub seed: u64,
    pub points: Vec<(u64, f64)>,
}

impl LatentGenReport {
    pub fn final_value(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// First evaluated step whose distance is at or below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<u64> {
        self.points.iter().find(|p| p.1 <= threshold).map(|p| p.0)
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.points
            .iter()
            .map(|(s, f)| format!("{},{},{s},{f}", self.latent_size, self.seed))
            .collect()
    }
}

pub struct LatentGenerator {
    pub cfg: RunConfig,
    pub net: MixerNet,
    pub params: ModelParams,
    pub step: u64,
    opt: OptimizerState,
    mean: Vec<f64>,
    std: Vec<f64>,
    latents: Tensor<f32>,
}

fn channel_stats(z: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (z.dim(0), z.dim(1));
    let s = z.len() / (n * c);
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..n {
        let item = z.outer(i);
        for k in 0..c {
            for &v in &item[k * s..(k + 1) * s] {
                mean[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
    }
    let m = (n * s) as f64;
    let std = mean
        .iter()
        .zip(&sq)
        .map(|(a, b)| ((b / m - (a / m) * (a / m)).max(0.0)).sqrt().max(STD_EPS))
        .collect();
    (mean.iter().map(|a| a / m).collect(), std)
}

fn per_channel(z: &Tensor<f32>, f: impl Fn(usize, f64) -> f64) -> Tensor<f32> {
    let (n, c) = (z.dim(0), z.dim(1));
    let s = z.len() / (n * c);
    Tensor::from_fn(z.shape(), |j| f((j / s) % c, z.data()[j] as f64) as f32)
}

impl LatentGenerator {
    /// Encode `dataset` with `ae` and set up a fresh generator seeded by `seed.global`.
    pub fn new(cfg: &RunConfig, ae: &Autoencoder, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let net = MixerNet::new(&cfg.mixer_config())?;
        let x = preprocess_eval(&dataset.images, cfg.crop_size)?;
        let z = ae.encode_mean(&x)?;
        let want = cfg.encoder.latent_shape(cfg.crop_size);
        if z.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "latents {:?} do not match the generator's latent shape {want:?}",
                &z.shape()[1..]
            )));
        }
        let (mean, std) = channel_stats(&z);
        let latents = per_channel(&z, |k, v| (v - mean[k]) / std[k]);
        let params = net.init(rng::derive_seed(cfg.seeds.global, "latent_gen_init", 0))?;
        let optim = OptimConfig {
            weight_decay: 0.0,
            ..cfg.optim.clone()
        };
        let opt = OptimizerState::new(&params, &optim);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params,
            step: 0,
            opt,
            mean,
            std,
            latents,
        })
    }

    pub fn latent_size(&self) -> usize {
        self.latents.len() / self.latents.dim(0)
    }

    /// One flow-matching step; returns the velocity loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let seed = self.cfg.seeds.global;
        let s = self.step;
        let lg = &self.cfg.latent_gen;
        let idx = sample_indices(seed, "lg_batch", s, self.latents.dim(0), lg.batch_size);
        let z = self.latents.select_outer(&idx);
        let mut r = rng::stream(seed, "lg_t", s);
        let t: Vec<f64> = (0..idx.len()).map(|_| 1.0 - rng::uniform(&mut r)).collect();
        let eps: Tensor<f32> = rng::normal_tensor(&mut rng::stream(seed, "lg_eps", s), z.shape());
        let x_t = forward_noise(&z, &eps, &t)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let xv = g.constant(x_t);
        let target = g.constant(velocity_target(&z, &eps)?);
        let v = self.net.forward(&mut g, &p, xv, &t)?;
        let loss = dsm_graph(&mut g, v, target, &t, unit_weight)?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::numeric(format!("latent generator loss is {lv} at step {}", s + 1)));
        }
        let mut grads = g.backward(loss)?;
        let mut gp = collect_grads(&self.params, &p, &mut grads)?;
        clip_gradients(&mut gp, self.cfg.optim.grad_clip)?;
        adamw_update(&mut self.params, &gp, &mut self.opt, lg.lr)?;
        self.step += 1;
        Ok(lv)
    }

    /// `n` latents integrated from noise stream `(seed.eval, "lg_sample", i)`, in latent units.
    pub fn sample_latents(&self, n: usize) -> Result<Tensor<f32>> {
        let [c, h, w] = self.cfg.encoder.latent_shape(self.cfg.crop_size);
        let mut x: Tensor<f32> = rng::per_item_normal(self.cfg.seeds.eval, "lg_sample", 0, &[n, c, h, w]);
        let steps = self.cfg.latent_gen.sample_steps;
        for k in (1..=steps).rev() {
            let tk = k as f64 / steps as f64;
            let dt = 1.0 / steps as f32;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let v = self.net.forward(&mut g, &p, xv, &vec![tk; n])?;
            for (a, &b) in x.data_mut().iter_mut().zip(g.value(v).data()) {
                *a -= dt * b;
            }
        }
        if !x.all_finite() {
            return Err(Error::numeric("latent generator produced non-finite samples"));
        }
        Ok(per_channel(&x, |k, v| v * self.std[k] + self.mean[k]))
    }

    /// Fréchet distance between decoded samples and the evaluation images.
    pub fn evaluate(&self, ae: &Autoencoder, fx: &FeatureExtractor, real: &Tensor<f32>) -> Result<f64> {
        let lg = &self.cfg.latent_gen;
        let z = self.sample_latents(lg.num_samples)?;
        let keep: Vec<usize> = (0..lg.decode_subset.min(lg.num_samples)).collect();
        let images = ae.decode(&z.select_outer(&keep), &self.cfg.sampler, 0)?;
        frechet_feature_distance(&images, real, fx)
    }

    /// Train for `latent_gen.steps`, evaluating at step 0 and every `eval_every` steps.
    pub fn run(
        &mut self,
        ae: &Autoencoder,
        fx: &FeatureExtractor,
        eval_set: &Dataset,
        csv: Option<&Path>,
    ) -> Result<LatentGenReport> {
        fx.require_trained()?;
        let idx = eval_indices(eval_set.len(), self.cfg.eval_count, self.cfg.seeds.eval);
        let (x, _, _) = eval_set.batch(&idx);
        let real = preprocess_eval(&x, self.cfg.crop_size)?;
        let mut report = LatentGenReport {
            latent_size: self.latent_size(),
            seed: self.cfg.seeds.global,
            points: Vec::new(),
        };
        let lg = self.cfg.latent_gen.clone();
        loop {
            if self.step % lg.eval_every == 0 || self.step == lg.steps {
                let fd = self.evaluate(ae, fx, &real)?;
                info!("latent generator step {} frechet {fd:.4}", self.step);
                report.points.push((self.step, fd));
                if let Some(p) = csv {
                    append_rows(p, CONVERGENCE_HEADER, &[format!("{},{},{},{fd}", report.latent_size, report.seed, self.step)])?;
                }
            }
            if self.step >= lg.steps {
                break;
            }
            self.train_step()?;
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = &self.cfg;
        let mut c = Checkpoint::new("latent_gen", &cfg.to_config_text(), &cfg.hash(), self.step, cfg.seeds.global);
        c.put_params("gen", &self.params);
        c.put_params("gen.m", &self.opt.m);
        c.put_params("gen.v", &self.opt.v);
        c.set_extra("gen.opt_step", self.opt.step);
        c.set_extra("gen.mean", &self.mean);
        c.set_extra("gen.std", &self.std);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardization_round_trip() {
        let z = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f32 * 0.7).sin() * 3.0 + 1.0);
        let (m, s) = channel_stats(&z);
        let std = per_channel(&z, |k, v| (v - m[k]) / s[k]);
        let (m2, s2) = channel_stats(&std);
        for k in 0..2 {
            assert!(m2[k].abs() < 1e-6);
            assert!((s2[k] - 1.0).abs() < 1e-5);
        }
        let back = per_channel(&std, |k, v| v * s[k] + m[k]);
        assert!(back.max_abs_diff(&z) < 1e-5);
    }

    #[test]
    fn steps_to_reach_threshold() {
        let r = LatentGenReport {
            latent_size: 64,
            seed: 1,
            points: vec![(0, 9.0), (10, 4.0), (20, 2.0)],
        };
        assert_eq!(r.steps_to_reach(4.5), Some(10));
        assert_eq!(r.steps_to_reach(1.0), None);
        assert_eq!(r.final_value(), Some(2.0));
        assert_eq!(r.csv_rows()[1], "64,1,10,4");
    }
}
