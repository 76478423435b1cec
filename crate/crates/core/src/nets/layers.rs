//! Building blocks shared by every architecture.

use std::fmt::Write as _;

use super::params::{Bound, Init, ParamSpec};
use crate::autograd::{Conv2dGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const GN_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

/// One row of a network's layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub params: usize,
}

/// Parameter specs and layer table of a network, collected in forward order.
#[derive(Debug, Default, Clone)]
pub struct Inventory {
    pub specs: Vec<ParamSpec>,
    pub rows: Vec<LayerRow>,
}

impl Inventory {
    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    fn add(&mut self, name: &str, kind: &str, in_ch: usize, out_ch: usize, stride: usize, specs: Vec<ParamSpec>) {
        let params = specs.iter().map(ParamSpec::numel).sum();
        self.rows.push(LayerRow {
            name: name.to_string(),
            kind: kind.to_string(),
            in_ch,
            out_ch,
            stride,
            params,
        });
        self.specs.extend(specs);
    }

    /// Fixed-width text rendering of the layer table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<40} {:<12} {:>6} {:>6} {:>6} {:>10}",
            "name", "type", "in", "out", "stride", "params"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<40} {:<12} {:>6} {:>6} {:>6} {:>10}",
                r.name, r.kind, r.in_ch, r.out_ch, r.stride, r.params
            );
        }
        let _ = writeln!(s, "total parameters: {}", self.num_params());
        s
    }
}

/// Group count for `channels`: 32 groups, or one per channel below 32.
///
/// Channel counts above 32 that 32 does not divide fall back to the largest
/// common divisor so every group has equal size.
pub fn norm_groups(channels: usize) -> usize {
    if channels <= 32 {
        channels
    } else {
        gcd(channels, 32)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            zero_init: false,
        }
    }

    pub fn same3(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 3, 1, 1)
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, inv: &mut Inventory) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let w_init = if self.zero_init {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / fan_in.sqrt())
        };
        inv.add(
            &self.name,
            &format!("conv{}x{}", self.kernel, self.kernel),
            self.in_ch,
            self.out_ch,
            self.stride,
            vec![
                ParamSpec {
                    name: format!("{}.weight", self.name),
                    shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                    init: w_init,
                },
                ParamSpec {
                    name: format!("{}.bias", self.name),
                    shape: vec![self.out_ch],
                    init: Init::Zeros,
                },
            ],
        );
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let sh = g.shape(x);
        if sh.len() != 4 || sh[1] != self.in_ch {
            return Err(Error::structure(
                &self.name,
                format!("expected {} input channels, got shape {sh:?}", self.in_ch),
            ));
        }
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        g.conv2d(
            x,
            w,
            Some(b),
            Conv2dGeom {
                stride: self.stride,
                pad: self.pad,
            },
        )
        .map_err(|e| Error::structure(&self.name, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups: norm_groups(channels),
        }
    }

    pub fn register(&self, inv: &mut Inventory) {
        inv.add(
            &self.name,
            &format!("groupnorm{}", self.groups),
            self.channels,
            self.channels,
            1,
            affine_specs(&self.name, self.channels),
        );
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, self.groups, GN_EPS)
            .map_err(|e| Error::structure(&self.name, e.to_string()))
    }
}

fn affine_specs(name: &str, n: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![n],
            init: Init::Ones,
        },
        ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![n],
            init: Init::Zeros,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn register(&self, inv: &mut Inventory) {
        inv.add(&self.name, "layernorm", self.dim, self.dim, 1, affine_specs(&self.name, self.dim));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
            .map_err(|e| Error::structure(&self.name, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
    pub zero_init: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_f: usize, out_f: usize) -> Self {
        Self {
            name: name.into(),
            in_f,
            out_f,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, inv: &mut Inventory) {
        let w_init = if self.zero_init {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (self.in_f as f64).sqrt())
        };
        inv.add(
            &self.name,
            "linear",
            self.in_f,
            self.out_f,
            1,
            vec![
                ParamSpec {
                    name: format!("{}.weight", self.name),
                    shape: vec![self.out_f, self.in_f],
                    init: w_init,
                },
                ParamSpec {
                    name: format!("{}.bias", self.name),
                    shape: vec![self.out_f],
                    init: Init::Zeros,
                },
            ],
        );
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        g.linear(x, w, Some(b))
            .map_err(|e| Error::structure(&self.name, e.to_string()))
    }
}

/// Pre-activation residual block with optional additive time embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub temb: Option<Dense>,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, temb_dim: Option<usize>) -> Self {
        Self {
            norm1: Norm::new(format!("{name}.norm1"), in_ch),
            conv1: Conv::same3(format!("{name}.conv1"), in_ch, out_ch),
            temb: temb_dim.map(|d| Dense::new(format!("{name}.temb"), d, out_ch)),
            norm2: Norm::new(format!("{name}.norm2"), out_ch),
            conv2: Conv::same3(format!("{name}.conv2"), out_ch, out_ch),
            skip: (in_ch != out_ch).then(|| Conv::new(format!("{name}.skip"), in_ch, out_ch, 1, 1, 0)),
        }
    }

    pub fn register(&self, inv: &mut Inventory) {
        self.norm1.register(inv);
        self.conv1.register(inv);
        if let Some(t) = &self.temb {
            t.register(inv);
        }
        self.norm2.register(inv);
        self.conv2.register(inv);
        if let Some(s) = &self.skip {
            s.register(inv);
        }
    }

    /// `emb_act` is the already-activated time embedding, `N x temb_dim`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, emb_act: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, p, h)?;
        if let (Some(t), Some(e)) = (&self.temb, emb_act) {
            let proj = t.forward(g, p, e)?;
            h = g.add_channel(h, proj)?;
        }
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Nearest-neighbour x2 upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub conv: Conv,
}

impl Upsample {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            conv: Conv::same3(format!("{name}.conv"), ch, ch),
        }
    }

    pub fn register(&self, inv: &mut Inventory) {
        self.conv.register(inv);
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let up = g.upsample_nearest(x, 2)?;
        self.conv.forward(g, p, up)
    }
}

/// Sinusoidal features of `1000 t`: sines in the first half, cosines in the second.
pub fn timestep_embedding<T: Float>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (n, &tv) in t.iter().enumerate() {
        let row = out.outer_mut(n);
        for k in 0..half {
            let freq = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
            let arg = 1000.0 * tv * freq;
            row[k] = T::c(arg.sin());
            row[half + k] = T::c(arg.cos());
        }
    }
    out
}
