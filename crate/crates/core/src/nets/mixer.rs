use serde::{Deserialize, Serialize};

use super::layers::{timestep_embedding, Dense, Inventory, LayerNorm};
use super::params::Bound;
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Latent channels, the per-token feature width.
    pub channels: usize,
    /// Latent grid cells `h * w`.
    pub tokens: usize,
    pub hidden: usize,
    pub token_hidden: usize,
    pub blocks: usize,
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("latent_gen.channels", self.channels),
            ("latent_gen.tokens", self.tokens),
            ("latent_gen.hidden", self.hidden),
            ("latent_gen.token_hidden", self.token_hidden),
            ("latent_gen.blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.hidden % 2 != 0 {
            return Err(Error::config("latent_gen.hidden", "must be even"));
        }
        Ok(())
    }
}

struct MixerBlock {
    ln_tok: LayerNorm,
    tok1: Dense,
    tok2: Dense,
    ln_ch: LayerNorm,
    ch1: Dense,
    ch2: Dense,
}

/// MLP-mixer velocity network over flattened latents, for the toy latent generator.
pub struct MixerNet {
    pub cfg: MixerConfig,
    embed: Dense,
    time: Dense,
    blocks: Vec<MixerBlock>,
    ln_out: LayerNorm,
    out: Dense,
}

impl MixerNet {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, t) = (cfg.hidden, cfg.tokens);
        let blocks = (0..cfg.blocks)
            .map(|i| MixerBlock {
                ln_tok: LayerNorm::new(format!("gen.block{i}.ln_tok"), h),
                tok1: Dense::new(format!("gen.block{i}.tok1"), t, cfg.token_hidden),
                tok2: Dense::new(format!("gen.block{i}.tok2"), cfg.token_hidden, t),
                ln_ch: LayerNorm::new(format!("gen.block{i}.ln_ch"), h),
                ch1: Dense::new(format!("gen.block{i}.ch1"), h, 2 * h),
                ch2: Dense::new(format!("gen.block{i}.ch2"), 2 * h, h),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed: Dense::new("gen.embed", cfg.channels, h),
            time: Dense::new("gen.time", h, h),
            blocks,
            ln_out: LayerNorm::new("gen.ln_out", h),
            out: Dense::new("gen.out", h, cfg.channels).zeroed(),
        })
    }

    /// Velocity for latents `x` (`N x c x h x w`) at times `t`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, t: &[f64]) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let (c, tok) = (self.cfg.channels, self.cfg.tokens);
        if sh.len() != 4 || sh[1] != c || sh[2] * sh[3] != tok {
            return Err(Error::structure(
                "gen.embed",
                format!("latent {sh:?} does not match {c} channels x {tok} cells"),
            ));
        }
        let n = sh[0];
        if t.len() != n {
            return Err(Error::Shape(format!("{} times for batch of {n}", t.len())));
        }
        let flat = g.reshape(x, &[n, c, tok])?;
        let tokens = g.transpose12(flat)?;
        let mut h = self.embed.forward(g, p, tokens)?;
        let temb = g.constant(timestep_embedding(t, self.cfg.hidden));
        let e = self.time.forward(g, p, temb)?;
        let e = g.silu(e);
        h = g.add_row(h, e)?;
        for b in &self.blocks {
            let y = b.ln_tok.forward(g, p, h)?;
            let y = g.transpose12(y)?;
            let y = b.tok1.forward(g, p, y)?;
            let y = g.silu(y);
            let y = b.tok2.forward(g, p, y)?;
            let y = g.transpose12(y)?;
            h = g.add(h, y)?;
            let y = b.ln_ch.forward(g, p, h)?;
            let y = b.ch1.forward(g, p, y)?;
            let y = g.silu(y);
            let y = b.ch2.forward(g, p, y)?;
            h = g.add(h, y)?;
        }
        let h = self.ln_out.forward(g, p, h)?;
        let v = self.out.forward(g, p, h)?;
        let v = g.transpose12(v)?;
        g.reshape(v, &sh)
    }
}

impl Architecture for MixerNet {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        self.embed.register(&mut inv);
        self.time.register(&mut inv);
        for b in &self.blocks {
            b.ln_tok.register(&mut inv);
            b.tok1.register(&mut inv);
            b.tok2.register(&mut inv);
            b.ln_ch.register(&mut inv);
            b.ch1.register(&mut inv);
            b.ch2.register(&mut inv);
        }
        self.ln_out.register(&mut inv);
        self.out.register(&mut inv);
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::init_params;
    use crate::tensor::Tensor;

    #[test]
    fn zero_velocity_at_init() {
        let cfg = MixerConfig {
            channels: 4,
            tokens: 16,
            hidden: 8,
            token_hidden: 8,
            blocks: 4,
        };
        let net = MixerNet::new(&cfg).unwrap();
        let params = init_params(&net.inventory().specs, 1).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[2, 4, 4, 4], |i| i as f32 * 0.01));
        let v = net.forward(&mut g, &p, x, &[0.2, 0.8]).unwrap();
        assert_eq!(g.shape(v), &[2, 4, 4, 4]);
        assert!(g.value(v).data().iter().all(|&a| a == 0.0));
    }
}
