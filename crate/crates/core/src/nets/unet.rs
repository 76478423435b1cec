use serde::{Deserialize, Serialize};

use super::layers::{timestep_embedding, Conv, Dense, Inventory, Norm, ResBlock, Upsample};
use super::params::{Bound, ParamStore};
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Decoder size presets: B, M and L analogs at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UNetPreset {
    B,
    M,
    L,
}

impl UNetPreset {
    pub const ALL: [UNetPreset; 3] = [UNetPreset::B, UNetPreset::M, UNetPreset::L];

    pub fn name(self) -> &'static str {
        match self {
            UNetPreset::B => "B",
            UNetPreset::M => "M",
            UNetPreset::L => "L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "B" | "b" => Some(UNetPreset::B),
            "M" | "m" => Some(UNetPreset::M),
            "L" | "l" => Some(UNetPreset::L),
            _ => None,
        }
    }

    /// `(base_channels, time_emb_dim)`.
    pub fn widths(self) -> (usize, usize) {
        match self {
            UNetPreset::B => (16, 64),
            UNetPreset::M => (32, 128),
            UNetPreset::L => (48, 192),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub time_emb_dim: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
    pub cond_channels: usize,
}

impl UNetConfig {
    pub fn preset(p: UNetPreset, cond_channels: usize) -> Self {
        let (base, temb) = p.widths();
        Self {
            base_channels: base,
            time_emb_dim: temb,
            channel_multipliers: vec![1, 2, 2],
            res_blocks: 1,
            cond_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::config("decoder.base_channels", "must be even and at least 2"));
        }
        if self.time_emb_dim == 0 {
            return Err(Error::config("decoder.time_emb_dim", "must be positive"));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::config("decoder.channel_multipliers", "need at least one positive multiplier"));
        }
        if self.res_blocks == 0 {
            return Err(Error::config("decoder.res_blocks", "must be positive"));
        }
        if self.cond_channels == 0 {
            return Err(Error::config("decoder.cond_channels", "must be positive"));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }
}

enum Step {
    Block(ResBlock),
    Down(Conv),
    Up(Upsample),
}

/// Conditional velocity U-Net.
pub struct UNet {
    pub cfg: UNetConfig,
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    down: Vec<Step>,
    mid: [ResBlock; 2],
    up: Vec<Step>,
    norm_out: Norm,
    conv_out: Conv,
}

impl UNet {
    pub fn new(cfg: &UNetConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let (b, te) = (cfg.base_channels, cfg.time_emb_dim);
        let conv_in = Conv::same3(format!("{prefix}.conv_in"), 3 + cfg.cond_channels, b);
        let mut skips = vec![b];
        let mut ch = b;
        let mut down = Vec::new();
        let levels = cfg.channel_multipliers.len();
        for (i, &m) in cfg.channel_multipliers.iter().enumerate() {
            for r in 0..cfg.res_blocks {
                down.push(Step::Block(ResBlock::new(
                    &format!("{prefix}.down{i}.block{r}"),
                    ch,
                    m * b,
                    Some(te),
                )));
                ch = m * b;
                skips.push(ch);
            }
            if i + 1 < levels {
                down.push(Step::Down(Conv::new(format!("{prefix}.down{i}.downsample"), ch, ch, 3, 2, 1)));
                skips.push(ch);
            }
        }
        let mid = [
            ResBlock::new(&format!("{prefix}.mid.block0"), ch, ch, Some(te)),
            ResBlock::new(&format!("{prefix}.mid.block1"), ch, ch, Some(te)),
        ];
        let mut up = Vec::new();
        for (i, &m) in cfg.channel_multipliers.iter().enumerate().rev() {
            for r in 0..=cfg.res_blocks {
                let skip = skips.pop().expect("skip stack balanced");
                up.push(Step::Block(ResBlock::new(
                    &format!("{prefix}.up{i}.block{r}"),
                    ch + skip,
                    m * b,
                    Some(te),
                )));
                ch = m * b;
            }
            if i > 0 {
                up.push(Step::Up(Upsample::new(&format!("{prefix}.up{i}.upsample"), ch)));
            }
        }
        debug_assert!(skips.is_empty());
        Ok(Self {
            cfg: cfg.clone(),
            time1: Dense::new(format!("{prefix}.time.fc1"), b, te),
            time2: Dense::new(format!("{prefix}.time.fc2"), te, te),
            conv_in,
            down,
            mid,
            up,
            norm_out: Norm::new(format!("{prefix}.norm_out"), ch),
            conv_out: Conv::same3(format!("{prefix}.conv_out"), ch, 3).zeroed(),
        })
    }

    /// Velocity prediction for noisy images `x_t` at times `t` given pixel-level `cond`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x_t: Var, t: &[f64], cond: Var) -> Result<Var> {
        let xs = g.shape(x_t).to_vec();
        let cs = g.shape(cond).to_vec();
        let k = self.cfg.size_multiple();
        if xs.len() != 4 || xs[1] != 3 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(Error::structure(
                self.conv_in.name.clone(),
                format!("x_t {xs:?} is not N x 3 x H x W with H, W divisible by {k}"),
            ));
        }
        if cs.len() != 4 || cs[0] != xs[0] || cs[1] != self.cfg.cond_channels || cs[2..] != xs[2..] {
            return Err(Error::structure(
                self.conv_in.name.clone(),
                format!("condition {cs:?} does not match x_t {xs:?}"),
            ));
        }
        if t.len() != xs[0] {
            return Err(Error::Shape(format!("{} times for batch of {}", t.len(), xs[0])));
        }
        let temb = g.constant(timestep_embedding(t, self.cfg.base_channels));
        let e = self.time1.forward(g, p, temb)?;
        let e = g.silu(e);
        let e = self.time2.forward(g, p, e)?;
        let emb = g.silu(e);

        let input = g.concat_channels(x_t, cond)?;
        let mut h = self.conv_in.forward(g, p, input)?;
        let mut stack = vec![h];
        for s in &self.down {
            h = match s {
                Step::Block(b) => b.forward(g, p, h, Some(emb))?,
                Step::Down(c) => c.forward(g, p, h)?,
                Step::Up(_) => unreachable!(),
            };
            stack.push(h);
        }
        for b in &self.mid {
            h = b.forward(g, p, h, Some(emb))?;
        }
        for s in &self.up {
            h = match s {
                Step::Block(b) => {
                    let skip = stack.pop().expect("skip stack balanced");
                    let cat = g.concat_channels(h, skip)?;
                    b.forward(g, p, cat, Some(emb))?
                }
                Step::Up(u) => u.forward(g, p, h)?,
                Step::Down(_) => unreachable!(),
            };
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h);
        self.conv_out.forward(g, p, h)
    }
}

impl Architecture for UNet {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        self.time1.register(&mut inv);
        self.time2.register(&mut inv);
        self.conv_in.register(&mut inv);
        let reg = |s: &Step, inv: &mut Inventory| match s {
            Step::Block(b) => b.register(inv),
            Step::Down(c) => c.register(inv),
            Step::Up(u) => u.register(inv),
        };
        for s in &self.down {
            reg(s, &mut inv);
        }
        for b in &self.mid {
            b.register(&mut inv);
        }
        for s in &self.up {
            reg(s, &mut inv);
        }
        self.norm_out.register(&mut inv);
        self.conv_out.register(&mut inv);
        inv
    }
}

/// Velocity prediction evaluated without recording gradients.
pub fn unet_forward<T: Float>(
    x_t: &Tensor<T>,
    t: &[f64],
    cond: &Tensor<T>,
    cfg: &UNetConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let net = UNet::new(cfg, "unet")?;
    params.check_against(&net.inventory().specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(x_t.clone());
    let c = g.constant(cond.clone());
    let v = net.forward(&mut g, &p, x, t, c)?;
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::init_params;

    #[test]
    fn zero_output_at_init_and_shape() {
        let cfg = UNetConfig {
            base_channels: 32,
            time_emb_dim: 64,
            channel_multipliers: vec![1, 2, 2],
            res_blocks: 1,
            cond_channels: 4,
        };
        let net = UNet::new(&cfg, "unet").unwrap();
        let params = init_params(&net.inventory().specs, 3).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i as f32) * 0.11).cos());
        let c = Tensor::from_fn(&[2, 4, 16, 16], |i| ((i as f32) * 0.07).sin());
        let v = unet_forward(&x, &[0.3, 0.9], &c, &cfg, &params).unwrap();
        assert_eq!(v.shape(), &[2, 3, 16, 16]);
        assert!(v.data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn presets_grow() {
        let counts: Vec<usize> = UNetPreset::ALL
            .iter()
            .map(|&p| {
                UNet::new(&UNetConfig::preset(p, 4), "unet")
                    .unwrap()
                    .inventory()
                    .num_params()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
    }

    #[test]
    fn mismatched_condition_is_structural() {
        let cfg = UNetConfig::preset(UNetPreset::B, 4);
        let net = UNet::new(&cfg, "unet").unwrap();
        let params = init_params(&net.inventory().specs, 3).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let c = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(
            unet_forward(&x, &[0.5], &c, &cfg, &params),
            Err(Error::Structure { .. })
        ));
    }
}
