use crate::config::{ModelKind, RunConfig};
use crate::data::ImageBatch;
use crate::diffusion::{self, SamplerConfig, UNetField};
use crate::error::{Error, Result};
use crate::nets::{
    init_params, Architecture, Encoder, GaussianDecoder, Inventory, LatentPosterior, ModelParams, ParamSpec,
    UNet,
};
use crate::autograd::Graph;
use crate::tensor::Tensor;

/// Images per forward pass when encoding or decoding large sets.
pub const CHUNK: usize = 16;

pub enum DecoderNet {
    Diffusion(UNet),
    Gaussian(GaussianDecoder),
}

/// Encoder plus decoder with their parameters in one store (`enc.*`, `unet.*` or `dec.*`).
pub struct Autoencoder {
    pub kind: ModelKind,
    pub encoder: Encoder,
    pub decoder: DecoderNet,
    pub params: ModelParams,
}

impl Autoencoder {
    pub fn architecture(cfg: &RunConfig) -> Result<(Encoder, DecoderNet)> {
        let encoder = Encoder::new(&cfg.encoder, "enc")?;
        let decoder = match cfg.model {
            ModelKind::Dgae => DecoderNet::Diffusion(UNet::new(&cfg.decoder, "unet")?),
            ModelKind::Baseline => DecoderNet::Gaussian(GaussianDecoder::new(&cfg.encoder, "dec")?),
        };
        Ok((encoder, decoder))
    }

    pub fn inventories(encoder: &Encoder, decoder: &DecoderNet) -> (Inventory, Inventory) {
        let d = match decoder {
            DecoderNet::Diffusion(u) => u.inventory(),
            DecoderNet::Gaussian(g) => g.inventory(),
        };
        (encoder.inventory(), d)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let (e, d) = Self::inventories(&self.encoder, &self.decoder);
        e.specs.into_iter().chain(d.specs).collect()
    }

    /// Fresh model; initialization draws from `seed.global`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let (encoder, decoder) = Self::architecture(cfg)?;
        let (e, d) = Self::inventories(&encoder, &decoder);
        let specs: Vec<ParamSpec> = e.specs.into_iter().chain(d.specs).collect();
        let params = init_params(&specs, cfg.seeds.global)?;
        Ok(Self {
            kind: cfg.model,
            encoder,
            decoder,
            params,
        })
    }

    pub fn from_params(cfg: &RunConfig, params: ModelParams) -> Result<Self> {
        let (encoder, decoder) = Self::architecture(cfg)?;
        let me = Self {
            kind: cfg.model,
            encoder,
            decoder,
            params,
        };
        me.params.check_against(&me.specs())?;
        Ok(me)
    }

    pub fn downsample(&self) -> usize {
        self.encoder.cfg.downsample
    }

    /// Layer tables of both networks.
    pub fn describe(&self) -> String {
        let (e, d) = Self::inventories(&self.encoder, &self.decoder);
        let dname = match self.decoder {
            DecoderNet::Diffusion(_) => "velocity U-Net decoder",
            DecoderNet::Gaussian(_) => "Gaussian decoder",
        };
        format!("encoder\n{}\n{dname}\n{}", e.table(), d.table())
    }

    pub fn encode_posterior(&self, x: &ImageBatch) -> Result<LatentPosterior> {
        let mut mus = Vec::new();
        let mut lvs = Vec::new();
        let n = x.dim(0);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let xb = x.select_outer(&idx);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.constant(xb);
            let out = self.encoder.forward(&mut g, &p, xv)?;
            mus.push(g.value(out.mu).clone());
            lvs.push(g.value(out.logvar).clone());
        }
        Ok(LatentPosterior {
            mu: Tensor::stack_outer(&mus)?,
            logvar: Tensor::stack_outer(&lvs)?,
        })
    }

    /// Posterior means, the latents used for evaluation.
    pub fn encode_mean(&self, x: &ImageBatch) -> Result<Tensor<f32>> {
        Ok(self.encode_posterior(x)?.mu)
    }

    /// Decode latents; item `i` of the diffusion sampler uses noise stream `item_offset + i`.
    pub fn decode(&self, z: &Tensor<f32>, sampler: &SamplerConfig, item_offset: u64) -> Result<ImageBatch> {
        let n = z.dim(0);
        let mut parts = Vec::new();
        match &self.decoder {
            DecoderNet::Diffusion(unet) => {
                let unet_params = self.params.subset("unet.");
                let field = UNetField::new(UNet::new(&unet.cfg, "unet")?, &unet_params)?;
                for start in (0..n).step_by(CHUNK) {
                    let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
                    let zb = z.select_outer(&idx);
                    parts.push(diffusion::sample(
                        &zb,
                        sampler,
                        &field,
                        self.downsample(),
                        item_offset + start as u64,
                    )?);
                }
            }
            DecoderNet::Gaussian(dec) => {
                for start in (0..n).step_by(CHUNK) {
                    let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
                    let mut g = Graph::new();
                    let p = self.params.bind(&mut g, false);
                    let zv = g.constant(z.select_outer(&idx));
                    let out = dec.forward(&mut g, &p, zv)?;
                    parts.push(g.value(out).clone());
                }
            }
        }
        let out = Tensor::stack_outer(&parts)?;
        if !out.all_finite() {
            return Err(Error::numeric("decoder produced non-finite pixels"));
        }
        Ok(out)
    }

    /// Posterior-mean encoding followed by decoding.
    pub fn reconstruct(&self, x: &ImageBatch, sampler: &SamplerConfig, item_offset: u64) -> Result<(Tensor<f32>, ImageBatch)> {
        let z = self.encode_mean(x)?;
        let xh = self.decode(&z, sampler, item_offset)?;
        Ok((z, xh))
    }
}
