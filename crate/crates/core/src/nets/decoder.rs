use super::encoder::EncoderConfig;
use super::layers::{Conv, Inventory, Norm, ResBlock, Upsample};
use super::params::{Bound, ParamStore};
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Baseline decoder: the encoder mirrored, predicting the Gaussian mean in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussianDecoder {
    pub cfg: EncoderConfig,
    conv_in: Conv,
    mid: ResBlock,
    levels: Vec<(Vec<ResBlock>, Option<Upsample>)>,
    norm_out: Norm,
    conv_out: Conv,
}

impl GaussianDecoder {
    pub fn new(cfg: &EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = cfg
            .channel_multipliers
            .iter()
            .map(|m| m * cfg.base_channels)
            .collect();
        let mut ch = *widths.last().expect("validated levels");
        let conv_in = Conv::same3(format!("{prefix}.conv_in"), cfg.latent_channels, ch);
        let mid = ResBlock::new(&format!("{prefix}.mid"), ch, ch, None);
        let mut levels = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&format!("{prefix}.up{i}.block{r}"), ch, w, None));
                ch = w;
            }
            let up = (i > 0).then(|| Upsample::new(&format!("{prefix}.up{i}.upsample"), ch));
            levels.push((blocks, up));
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            mid,
            levels,
            norm_out: Norm::new(format!("{prefix}.norm_out"), ch),
            conv_out: Conv::same3(format!("{prefix}.conv_out"), ch, 3),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let sh = g.shape(z);
        if sh.len() != 4 || sh[1] != self.cfg.latent_channels {
            return Err(Error::structure(
                self.conv_in.name.clone(),
                format!("latent {sh:?} does not have {} channels", self.cfg.latent_channels),
            ));
        }
        let mut h = self.conv_in.forward(g, p, z)?;
        h = self.mid.forward(g, p, h, None)?;
        for (blocks, up) in &self.levels {
            for b in blocks {
                h = b.forward(g, p, h, None)?;
            }
            if let Some(u) = up {
                h = u.forward(g, p, h)?;
            }
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        h = self.conv_out.forward(g, p, h)?;
        Ok(g.tanh(h))
    }
}

impl Architecture for GaussianDecoder {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        self.conv_in.register(&mut inv);
        self.mid.register(&mut inv);
        for (blocks, up) in &self.levels {
            for b in blocks {
                b.register(&mut inv);
            }
            if let Some(u) = up {
                u.register(&mut inv);
            }
        }
        self.norm_out.register(&mut inv);
        self.conv_out.register(&mut inv);
        inv
    }
}

pub fn gaussian_decoder_forward<T: Float>(
    z: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let dec = GaussianDecoder::new(cfg, "dec")?;
    params.check_against(&dec.inventory().specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let out = dec.forward(&mut g, &p, zv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::init_params;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            downsample: 4,
            latent_channels: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2, 2],
            res_blocks: 1,
        }
    }

    #[test]
    fn output_matches_image_shape_and_range() {
        let cfg = tiny();
        let dec = GaussianDecoder::new(&cfg, "dec").unwrap();
        let params = init_params(&dec.inventory().specs, 5).unwrap();
        let z = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32 - 3.0);
        let x = gaussian_decoder_forward(&z, &cfg, &params).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert!(x.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(x, gaussian_decoder_forward(&z, &cfg, &params).unwrap());
    }

    #[test]
    fn bias_only_params_give_constant_image() {
        let cfg = tiny();
        let dec = GaussianDecoder::new(&cfg, "dec").unwrap();
        let mut params = init_params(&dec.inventory().specs, 5).unwrap();
        for (name, t) in params.iter_mut() {
            if !name.ends_with(".gamma") {
                t.data_mut().fill(0.0);
            }
        }
        params
            .get_mut("dec.conv_out.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.2, -0.4, 0.6]);
        let z = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let x = gaussian_decoder_forward(&z, &cfg, &params).unwrap();
        for (c, b) in [0.2f32, -0.4, 0.6].iter().enumerate() {
            let want = b.tanh();
            let plane = &x.outer(0)[c * 64..(c + 1) * 64];
            assert!(plane.iter().all(|v| (v - want).abs() < 1e-6));
        }
    }
}
