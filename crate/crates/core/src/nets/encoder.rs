use serde::{Deserialize, Serialize};

use super::layers::{Conv, Inventory, Norm, ResBlock};
use super::params::{Bound, ParamStore};
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub downsample: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
}

impl EncoderConfig {
    /// Desk-scale encoder for factor `f` and `c` latent channels.
    pub fn desk(f: usize, c: usize) -> Result<Self> {
        let mults = match f {
            8 => vec![1, 2, 2, 4],
            16 => vec![1, 2, 2, 4, 4],
            32 => vec![1, 2, 2, 4, 4, 4],
            _ => return Err(Error::config("encoder.downsample", format!("{f} not in {{8, 16, 32}}"))),
        };
        let cfg = Self {
            downsample: f,
            latent_channels: c,
            base_channels: 16,
            channel_multipliers: mults,
            res_blocks: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample;
        if !matches!(f, 1 | 2 | 4 | 8 | 16 | 32) {
            return Err(Error::config("encoder.downsample", format!("{f} is not a power of two up to 32")));
        }
        let want = f.trailing_zeros() as usize + 1;
        if self.channel_multipliers.len() != want {
            return Err(Error::config(
                "encoder.channel_multipliers",
                format!(
                    "factor {f} needs {want} levels, got {}",
                    self.channel_multipliers.len()
                ),
            ));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::config("encoder.channel_multipliers", "multipliers must be positive"));
        }
        if self.latent_channels == 0 {
            return Err(Error::config("encoder.latent_channels", "must be positive"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("encoder.base_channels", "must be positive"));
        }
        if self.res_blocks == 0 {
            return Err(Error::config("encoder.res_blocks", "must be positive"));
        }
        Ok(())
    }

    /// Latent tensor shape `[c, H/f, W/f]` for a square input.
    pub fn latent_shape(&self, image_size: usize) -> [usize; 3] {
        let s = image_size / self.downsample;
        [self.latent_channels, s, s]
    }

    pub fn latent_size(&self, image_size: usize) -> usize {
        self.latent_shape(image_size).iter().product()
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }
}

/// Diagonal Gaussian posterior over the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior<T = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// Graph handles of a posterior; `raw` is the encoder output before the split.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
    pub raw: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv_in: Conv,
    levels: Vec<(Vec<ResBlock>, Option<Conv>)>,
    mid: ResBlock,
    norm_out: Norm,
    conv_out: Conv,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let conv_in = Conv::same3(format!("{prefix}.conv_in"), 3, cfg.base_channels);
        let mut ch = cfg.base_channels;
        let mut levels = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&format!("{prefix}.down{i}.block{r}"), ch, w, None));
                ch = w;
            }
            let down = (i + 1 < widths.len()).then(|| Conv::new(format!("{prefix}.down{i}.downsample"), ch, ch, 3, 2, 1));
            levels.push((blocks, down));
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            levels,
            mid: ResBlock::new(&format!("{prefix}.mid"), ch, ch, None),
            norm_out: Norm::new(format!("{prefix}.norm_out"), ch),
            conv_out: Conv::same3(format!("{prefix}.conv_out"), ch, 2 * cfg.latent_channels),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<PosteriorVars> {
        let sh = g.shape(x).to_vec();
        let f = self.cfg.downsample;
        if sh.len() != 4 || sh[1] != 3 || sh[2] % f != 0 || sh[3] % f != 0 {
            return Err(Error::structure(
                self.conv_in.name.clone(),
                format!("input {sh:?} is not N x 3 x H x W with H, W divisible by {f}"),
            ));
        }
        let mut h = self.conv_in.forward(g, p, x)?;
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(g, p, h, None)?;
            }
            if let Some(d) = down {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid.forward(g, p, h, None)?;
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        let raw = self.conv_out.forward(g, p, h)?;
        let c = self.cfg.latent_channels;
        let mu = g.slice_channels(raw, 0, c)?;
        let lv = g.slice_channels(raw, c, c)?;
        let logvar = g.clamp(lv, T::c(LOGVAR_MIN), T::c(LOGVAR_MAX));
        Ok(PosteriorVars { mu, logvar, raw })
    }
}

impl Architecture for Encoder {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        self.conv_in.register(&mut inv);
        for (blocks, down) in &self.levels {
            for b in blocks {
                b.register(&mut inv);
            }
            if let Some(d) = down {
                d.register(&mut inv);
            }
        }
        self.mid.register(&mut inv);
        self.norm_out.register(&mut inv);
        self.conv_out.register(&mut inv);
        inv
    }
}

/// Posterior for a batch, evaluated without recording gradients.
pub fn encoder_forward<T: Float>(
    x: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
) -> Result<LatentPosterior<T>> {
    let enc = Encoder::new(cfg, "enc")?;
    params.check_against(&enc.inventory().specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, &p, xv)?;
    Ok(LatentPosterior {
        mu: g.value(out.mu).clone(),
        logvar: g.value(out.logvar).clone(),
    })
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Float>(post: &LatentPosterior<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    post.mu.expect_same_shape(&post.logvar, "posterior")?;
    post.mu.expect_same_shape(noise, "reparameterization noise")?;
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .zip(noise.data())
        .map(|((&m, &lv), &n)| m + (lv * T::c(0.5)).exp() * n)
        .collect();
    Tensor::from_vec(post.mu.shape(), data)
}

/// Differentiable reparameterization on the graph; `noise` is a constant.
pub fn reparameterize_graph<T: Float>(g: &mut Graph<T>, post: &PosteriorVars, noise: Tensor<T>) -> Result<Var> {
    let half = g.scale(post.logvar, T::c(0.5));
    let std = g.exp(half);
    let n = g.constant(noise);
    let scaled = g.mul(std, n)?;
    g.add(post.mu, scaled)
}

/// Nearest-neighbour replication of each latent cell into an `f x f` block.
pub fn condition_upsample<T: Float>(z: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    if z.rank() != 4 || f == 0 {
        return Err(Error::Shape(format!("condition_upsample of {:?} by {f}", z.shape())));
    }
    Ok(crate::autograd::upsample_nearest_raw(z, f))
}
