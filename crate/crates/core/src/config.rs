//! Run configuration.
//!
//! Configs are flat `key = value` text with dotted section prefixes, `#`
//! comments and blank lines. Every key is known in advance; anything else is
//! rejected with the offending key and line. The canonical rendering lists
//! every resolved key in a fixed order, and its SHA-256 is the config hash.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{DiscScale, EncoderConfig, MixerConfig, UNetConfig, UNetPreset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Dgae,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dgae => "dgae",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dgae" => Some(ModelKind::Dgae),
            "baseline" | "baseline-vae" => Some(ModelKind::Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_final: 1e-5,
            warmup: 10_000,
            total_steps: 20_000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub scale: DiscScale,
    pub start_step: u64,
    /// Discriminator updates happen on steps divisible by this.
    pub update_interval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainConfig {
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGenConfig {
    pub hidden: usize,
    pub token_hidden: usize,
    pub blocks: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub num_samples: usize,
    pub decode_subset: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sample_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub data: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    pub crop_size: usize,
    pub eval_images: usize,
    pub eval_count: usize,
    pub encoder: EncoderConfig,
    pub decoder_preset: Option<UNetPreset>,
    pub decoder: UNetConfig,
    pub disc: DiscConfig,
    pub loss: LossWeights,
    pub t_min: f64,
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub features: FeatureTrainConfig,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub latent_gen: LatentGenConfig,
    pub seeds: Seeds,
    pub out_dir: String,
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "model",
    "latent",
    "data.num_images",
    "data.image_size",
    "data.shape_classes",
    "data.color_classes",
    "data.octaves",
    "data.crop",
    "eval.images",
    "eval.count",
    "encoder.downsample",
    "encoder.latent_channels",
    "encoder.base_channels",
    "encoder.multipliers",
    "encoder.res_blocks",
    "decoder.preset",
    "decoder.base_channels",
    "decoder.time_emb_dim",
    "decoder.multipliers",
    "decoder.res_blocks",
    "disc.scale",
    "disc.start_step",
    "disc.update_interval",
    "loss.alpha",
    "loss.beta",
    "loss.eta",
    "loss.lambda",
    "loss.t_min",
    "optim.lr",
    "optim.lr_final",
    "optim.warmup",
    "optim.total_steps",
    "optim.batch_size",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.grad_clip",
    "sampler.steps",
    "sampler.stochastic",
    "sampler.churn",
    "features.train_steps",
    "features.batch_size",
    "features.lr",
    "train.log_every",
    "train.checkpoint_every",
    "latent_gen.hidden",
    "latent_gen.token_hidden",
    "latent_gen.blocks",
    "latent_gen.steps",
    "latent_gen.eval_every",
    "latent_gen.samples",
    "latent_gen.decode_subset",
    "latent_gen.batch_size",
    "latent_gen.lr",
    "latent_gen.sample_steps",
    "seed.global",
    "seed.data",
    "seed.eval",
    "out_dir",
];

/// Parse `f{factor}c{channels}`, e.g. `f16c8`.
pub fn parse_latent_preset(s: &str) -> Option<(usize, usize)> {
    let rest = s.strip_prefix('f')?;
    let (f, c) = rest.split_once('c')?;
    let f: usize = f.parse().ok()?;
    let c: usize = c.parse().ok()?;
    (matches!(f, 8 | 16 | 32) && c > 0).then_some((f, c))
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Values set so far; unset options fall back to model- and factor-dependent defaults.
#[derive(Default)]
struct Raw {
    model: Option<ModelKind>,
    pairs: Vec<(String, String, usize)>,
}

impl RunConfig {
    /// Defaults for `model`.
    pub fn defaults(model: ModelKind) -> Self {
        let dataset = DatasetSpec::default();
        let encoder = EncoderConfig::desk(8, 4).expect("valid default encoder");
        Self {
            model,
            crop_size: dataset.image_size,
            dataset,
            eval_images: 512,
            eval_count: 512,
            decoder_preset: Some(UNetPreset::B),
            decoder: UNetConfig::preset(UNetPreset::B, encoder.latent_channels),
            encoder,
            disc: DiscConfig {
                scale: DiscScale::S,
                start_step: 2000,
                update_interval: 2,
            },
            loss: match model {
                ModelKind::Dgae => LossWeights::dgae_default(),
                ModelKind::Baseline => LossWeights::baseline_default(),
            },
            t_min: 1e-3,
            optim: OptimConfig::default(),
            sampler: SamplerConfig::default(),
            features: FeatureTrainConfig {
                train_steps: 2000,
                batch_size: 32,
                lr: 1e-3,
            },
            log_every: 50,
            checkpoint_every: 1000,
            latent_gen: LatentGenConfig {
                hidden: 128,
                token_hidden: 64,
                blocks: 4,
                steps: 5000,
                eval_every: 500,
                num_samples: 256,
                decode_subset: 32,
                batch_size: 64,
                lr: 1e-3,
                sample_steps: 50,
            },
            seeds: Seeds {
                global: 0,
                data: 0,
                eval: 0,
            },
            out_dir: "runs".into(),
        }
    }

    /// Parse config text, then apply `overrides` (`key=value`) in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = Raw::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(line.to_string(), format!("line {}: expected `key = value`", i + 1))
            })?;
            raw.pairs.push((k.trim().to_string(), v.trim().to_string(), i + 1));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must be `key=value`"))?;
            raw.pairs.push((k.trim().to_string(), v.trim().to_string(), 0));
        }
        for (k, v, line) in &raw.pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k.clone(), format!("{}: unknown key", location(*line))));
            }
            if k == "model" {
                raw.model = Some(
                    ModelKind::parse(v)
                        .ok_or_else(|| Error::config("model", format!("{}: `{v}` is not dgae or baseline", location(*line))))?,
                );
            }
        }
        let mut cfg = Self::defaults(raw.model.unwrap_or(ModelKind::Dgae));
        let mut enc_mults_set = false;
        let mut dec_widths_set = false;
        let ordered = raw
            .pairs
            .iter()
            .filter(|(k, _, _)| k == "latent")
            .chain(raw.pairs.iter().filter(|(k, _, _)| k != "latent" && k != "model"));
        for (k, v, line) in ordered {
            cfg.set(k, v, *line, &mut enc_mults_set, &mut dec_widths_set)?;
        }
        if !enc_mults_set {
            let base = cfg.encoder.base_channels;
            let res = cfg.encoder.res_blocks;
            cfg.encoder = EncoderConfig::desk(cfg.encoder.downsample, cfg.encoder.latent_channels)?;
            cfg.encoder.base_channels = base;
            cfg.encoder.res_blocks = res;
        }
        if dec_widths_set {
            let widths = (cfg.decoder.base_channels, cfg.decoder.time_emb_dim);
            cfg.decoder_preset = cfg.decoder_preset.filter(|p| p.widths() == widths);
        } else if let Some(p) = cfg.decoder_preset {
            let (b, t) = p.widths();
            cfg.decoder.base_channels = b;
            cfg.decoder.time_emb_dim = t;
        }
        cfg.decoder.cond_channels = cfg.encoder.latent_channels;
        cfg.sampler.noise_seed = cfg.seeds.eval;
        cfg.dataset.seed = cfg.seeds.data;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    fn set(&mut self, k: &str, v: &str, line: usize, enc_mults: &mut bool, dec_widths: &mut bool) -> Result<()> {
        let loc = location(line);
        let bad = |what: &str| Error::config(k.to_string(), format!("{loc}: `{v}` is not {what}"));
        let u = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let u64_ = || v.parse::<u64>().map_err(|_| bad("a non-negative integer"));
        let f = || {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad("a finite number"))
        };
        let b = || match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("true or false")),
        };
        match k {
            "latent" => {
                let (fac, c) = parse_latent_preset(v).ok_or_else(|| bad("a latent preset like f8c4"))?;
                self.encoder.downsample = fac;
                self.encoder.latent_channels = c;
            }
            "data.num_images" => self.dataset.num_images = u()?,
            "data.image_size" => {
                self.dataset.image_size = u()?;
                self.crop_size = self.dataset.image_size;
            }
            "data.shape_classes" => self.dataset.num_shape_classes = u()?,
            "data.color_classes" => self.dataset.num_color_classes = u()?,
            "data.octaves" => self.dataset.texture_octaves = u()?,
            "data.crop" => self.crop_size = u()?,
            "eval.images" => self.eval_images = u()?,
            "eval.count" => self.eval_count = u()?,
            "encoder.downsample" => self.encoder.downsample = u()?,
            "encoder.latent_channels" => self.encoder.latent_channels = u()?,
            "encoder.base_channels" => self.encoder.base_channels = u()?,
            "encoder.multipliers" => {
                self.encoder.channel_multipliers = parse_list(v).ok_or_else(|| bad("a comma-separated list"))?;
                *enc_mults = true;
            }
            "encoder.res_blocks" => self.encoder.res_blocks = u()?,
            "decoder.preset" => {
                let p = UNetPreset::parse(v).ok_or_else(|| bad("one of B, M, L"))?;
                self.decoder_preset = Some(p);
            }
            "decoder.base_channels" => {
                self.decoder.base_channels = u()?;
                *dec_widths = true;
            }
            "decoder.time_emb_dim" => {
                self.decoder.time_emb_dim = u()?;
                *dec_widths = true;
            }
            "decoder.multipliers" => {
                self.decoder.channel_multipliers = parse_list(v).ok_or_else(|| bad("a comma-separated list"))?
            }
            "decoder.res_blocks" => self.decoder.res_blocks = u()?,
            "disc.scale" => self.disc.scale = DiscScale::parse(v).ok_or_else(|| bad("one of S, M, L"))?,
            "disc.start_step" => self.disc.start_step = u64_()?,
            "disc.update_interval" => self.disc.update_interval = u64_()?,
            "loss.alpha" => self.loss.alpha = f()?,
            "loss.beta" => self.loss.beta = f()?,
            "loss.eta" => self.loss.eta = f()?,
            "loss.lambda" => self.loss.lambda = f()?,
            "loss.t_min" => self.t_min = f()?,
            "optim.lr" => self.optim.lr = f()?,
            "optim.lr_final" => self.optim.lr_final = f()?,
            "optim.warmup" => self.optim.warmup = u64_()?,
            "optim.total_steps" => self.optim.total_steps = u64_()?,
            "optim.batch_size" => self.optim.batch_size = u()?,
            "optim.beta1" => self.optim.beta1 = f()?,
            "optim.beta2" => self.optim.beta2 = f()?,
            "optim.eps" => self.optim.eps = f()?,
            "optim.weight_decay" => self.optim.weight_decay = f()?,
            "optim.grad_clip" => self.optim.grad_clip = f()?,
            "sampler.steps" => self.sampler.num_steps = u()?,
            "sampler.stochastic" => self.sampler.stochastic = b()?,
            "sampler.churn" => self.sampler.churn = f()?,
            "features.train_steps" => self.features.train_steps = u64_()?,
            "features.batch_size" => self.features.batch_size = u()?,
            "features.lr" => self.features.lr = f()?,
            "train.log_every" => self.log_every = u64_()?,
            "train.checkpoint_every" => self.checkpoint_every = u64_()?,
            "latent_gen.hidden" => self.latent_gen.hidden = u()?,
            "latent_gen.token_hidden" => self.latent_gen.token_hidden = u()?,
            "latent_gen.blocks" => self.latent_gen.blocks = u()?,
            "latent_gen.steps" => self.latent_gen.steps = u64_()?,
            "latent_gen.eval_every" => self.latent_gen.eval_every = u64_()?,
            "latent_gen.samples" => self.latent_gen.num_samples = u()?,
            "latent_gen.decode_subset" => self.latent_gen.decode_subset = u()?,
            "latent_gen.batch_size" => self.latent_gen.batch_size = u()?,
            "latent_gen.lr" => self.latent_gen.lr = f()?,
            "latent_gen.sample_steps" => self.latent_gen.sample_steps = u()?,
            "seed.global" => self.seeds.global = u64_()?,
            "seed.data" => self.seeds.data = u64_()?,
            "seed.eval" => self.seeds.eval = u64_()?,
            "out_dir" => {
                if v.is_empty() {
                    return Err(bad("a path"));
                }
                self.out_dir = v.to_string();
            }
            _ => return Err(Error::config(k.to_string(), format!("{loc}: unknown key"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.sampler.validate()?;
        match self.model {
            ModelKind::Dgae => self.loss.validate_dgae()?,
            ModelKind::Baseline => self.loss.validate()?,
        }
        let img = self.dataset.image_size;
        if self.crop_size == 0 || self.crop_size > img {
            return Err(Error::config("data.crop", format!("{} must lie in 1..={img}", self.crop_size)));
        }
        let f = self.encoder.downsample;
        let need = f.max(self.decoder.size_multiple()).max(8);
        if self.crop_size % need != 0 {
            return Err(Error::config(
                "data.crop",
                format!("{} is not divisible by {need} (downsampling factor and network strides)", self.crop_size),
            ));
        }
        if self.crop_size / f < 2 {
            return Err(Error::config(
                "encoder.downsample",
                format!("factor {f} leaves a latent grid smaller than 2x2 at {} px", self.crop_size),
            ));
        }
        if self.eval_images < 2 {
            return Err(Error::config("eval.images", "need at least 2 held-out images"));
        }
        if self.eval_count < 2 || self.eval_count > self.eval_images {
            return Err(Error::config("eval.count", format!("must lie in 2..={}", self.eval_images)));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config("loss.t_min", "must lie in (0, 1)"));
        }
        let o = &self.optim;
        if o.total_steps == 0 {
            return Err(Error::config("optim.total_steps", "must be positive"));
        }
        if o.warmup >= o.total_steps {
            return Err(Error::config("optim.warmup", "must be smaller than optim.total_steps"));
        }
        if o.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        for (k, v) in [("optim.lr", o.lr), ("optim.lr_final", o.lr_final), ("optim.eps", o.eps), ("optim.grad_clip", o.grad_clip)] {
            if v <= 0.0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        for (k, v) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        if o.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.disc.update_interval == 0 {
            return Err(Error::config("disc.update_interval", "must be positive"));
        }
        if self.features.batch_size == 0 || self.features.lr <= 0.0 {
            return Err(Error::config("features", "batch size and learning rate must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        self.mixer_config().validate()?;
        let lg = &self.latent_gen;
        if lg.eval_every == 0 || lg.num_samples < 2 || lg.decode_subset < 2 || lg.batch_size == 0 || lg.lr <= 0.0 || lg.sample_steps == 0 {
            return Err(Error::config(
                "latent_gen",
                "eval_every, batch_size, lr and sample_steps must be positive; samples and decode_subset at least 2",
            ));
        }
        Ok(())
    }

    pub fn mixer_config(&self) -> MixerConfig {
        let [c, h, w] = self.encoder.latent_shape(self.crop_size);
        MixerConfig {
            channels: c,
            tokens: h * w,
            hidden: self.latent_gen.hidden,
            token_hidden: self.latent_gen.token_hidden,
            blocks: self.latent_gen.blocks,
        }
    }

    /// Every key with its resolved value, one per line, in [`KEYS`] order.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let e = &self.encoder;
        let d = &self.decoder;
        let o = &self.optim;
        let lg = &self.latent_gen;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", self.model.name().into());
        kv("latent", format!("f{}c{}", e.downsample, e.latent_channels));
        kv("data.num_images", self.dataset.num_images.to_string());
        kv("data.image_size", self.dataset.image_size.to_string());
        kv("data.shape_classes", self.dataset.num_shape_classes.to_string());
        kv("data.color_classes", self.dataset.num_color_classes.to_string());
        kv("data.octaves", self.dataset.texture_octaves.to_string());
        kv("data.crop", self.crop_size.to_string());
        kv("eval.images", self.eval_images.to_string());
        kv("eval.count", self.eval_count.to_string());
        kv("encoder.downsample", e.downsample.to_string());
        kv("encoder.latent_channels", e.latent_channels.to_string());
        kv("encoder.base_channels", e.base_channels.to_string());
        kv("encoder.multipliers", fmt_list(&e.channel_multipliers));
        kv("encoder.res_blocks", e.res_blocks.to_string());
        kv(
            "decoder.preset",
            self.decoder_preset.map_or("custom".into(), |p| p.name().to_string()),
        );
        kv("decoder.base_channels", d.base_channels.to_string());
        kv("decoder.time_emb_dim", d.time_emb_dim.to_string());
        kv("decoder.multipliers", fmt_list(&d.channel_multipliers));
        kv("decoder.res_blocks", d.res_blocks.to_string());
        kv("disc.scale", self.disc.scale.name().into());
        kv("disc.start_step", self.disc.start_step.to_string());
        kv("disc.update_interval", self.disc.update_interval.to_string());
        kv("loss.alpha", self.loss.alpha.to_string());
        kv("loss.beta", self.loss.beta.to_string());
        kv("loss.eta", self.loss.eta.to_string());
        kv("loss.lambda", self.loss.lambda.to_string());
        kv("loss.t_min", self.t_min.to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.lr_final", o.lr_final.to_string());
        kv("optim.warmup", o.warmup.to_string());
        kv("optim.total_steps", o.total_steps.to_string());
        kv("optim.batch_size", o.batch_size.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.grad_clip", o.grad_clip.to_string());
        kv("sampler.steps", self.sampler.num_steps.to_string());
        kv("sampler.stochastic", self.sampler.stochastic.to_string());
        kv("sampler.churn", self.sampler.churn.to_string());
        kv("features.train_steps", self.features.train_steps.to_string());
        kv("features.batch_size", self.features.batch_size.to_string());
        kv("features.lr", self.features.lr.to_string());
        kv("train.log_every", self.log_every.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("latent_gen.hidden", lg.hidden.to_string());
        kv("latent_gen.token_hidden", lg.token_hidden.to_string());
        kv("latent_gen.blocks", lg.blocks.to_string());
        kv("latent_gen.steps", lg.steps.to_string());
        kv("latent_gen.eval_every", lg.eval_every.to_string());
        kv("latent_gen.samples", lg.num_samples.to_string());
        kv("latent_gen.decode_subset", lg.decode_subset.to_string());
        kv("latent_gen.batch_size", lg.batch_size.to_string());
        kv("latent_gen.lr", lg.lr.to_string());
        kv("latent_gen.sample_steps", lg.sample_steps.to_string());
        kv("seed.global", self.seeds.global.to_string());
        kv("seed.data", self.seeds.data.to_string());
        kv("seed.eval", self.seeds.eval.to_string());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// SHA-256 of [`Self::canonical_text`] in hex.
    pub fn hash(&self) -> String {
        crate::data::hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Canonical text with `decoder.preset = custom` dropped so it parses back.
    pub fn to_config_text(&self) -> String {
        self.canonical_text()
            .lines()
            .filter(|l| *l != "decoder.preset = custom")
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Held-out evaluation dataset: same generator, disjoint seed.
    pub fn eval_dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_images: self.eval_images,
            seed: crate::rng::derive_seed(self.seeds.data, "eval_data", 0),
            ..self.dataset.clone()
        }
    }
}

fn location(line: usize) -> String {
    if line == 0 {
        "override".into()
    } else {
        format!("line {line}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults_with_stable_hash() {
        let a = RunConfig::parse("model = dgae\n", &[]).unwrap();
        let b = RunConfig::parse("# comment\nmodel=dgae\n\n", &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.loss.lambda, 0.0);
        assert_eq!(RunConfig::parse("model = baseline", &[]).unwrap().loss.lambda, 0.5);
    }

    #[test]
    fn latent_preset() {
        let c = RunConfig::parse("latent = f16c8", &[]).unwrap();
        assert_eq!(c.encoder.downsample, 16);
        assert_eq!(c.encoder.latent_channels, 8);
        assert_eq!(c.encoder.channel_multipliers.len(), 5);
        assert_eq!(c.decoder.cond_channels, 8);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("laten_channels = 4", &[]) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "laten_channels");
                assert!(message.contains("line 1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = RunConfig::parse("optim.lr = 0.01", &["optim.lr=0.02".into()]).unwrap();
        assert_eq!(c.optim.lr, 0.02);
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::parse("model = baseline\nlatent = f8c2\ndecoder.preset = M\ndisc.scale = L", &[]).unwrap();
        let back = RunConfig::parse(&c.to_config_text(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        assert_eq!(c.canonical_text().lines().count(), KEYS.len());
    }

    #[test]
    fn dgae_rejects_gan_weight() {
        assert!(matches!(
            RunConfig::parse("loss.lambda = 0.5", &[]),
            Err(Error::Config { field, .. }) if field == "loss.lambda"
        ));
    }
}
