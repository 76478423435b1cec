use serde::{Deserialize, Serialize};

use super::layers::{Conv, Inventory, Norm};
use super::params::{Bound, ParamStore};
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscScale {
    S,
    M,
    L,
}

impl DiscScale {
    pub const ALL: [DiscScale; 3] = [DiscScale::S, DiscScale::M, DiscScale::L];

    pub fn base_channels(self) -> usize {
        match self {
            DiscScale::S => 32,
            DiscScale::M => 64,
            DiscScale::L => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscScale::S => "S",
            DiscScale::M => "M",
            DiscScale::L => "L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "S" | "s" => Some(DiscScale::S),
            "M" | "m" => Some(DiscScale::M),
            "L" | "l" => Some(DiscScale::L),
            _ => None,
        }
    }
}

/// PatchGAN discriminator.
///
/// | layer | kernel | stride | channels | norm |
/// |-------|--------|--------|----------|------|
/// | conv0 | 4 | 2 | 3 → b | none |
/// | conv1 | 4 | 2 | b → 2b | group |
/// | conv2 | 4 | 2 | 2b → 4b | group |
/// | out   | 3 | 1 | 4b → 1 | none |
///
/// Each hidden layer ends in LeakyReLU(0.2); an `H x W` input yields `H/8 x W/8` logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub scale: DiscScale,
    convs: Vec<(Conv, Option<Norm>)>,
    out: Conv,
}

impl Discriminator {
    pub fn new(scale: DiscScale, prefix: &str) -> Self {
        Self::with_base(scale, scale.base_channels(), prefix)
    }

    /// Same layer table with an arbitrary base width, for tiny test configs.
    pub fn with_base(scale: DiscScale, b: usize, prefix: &str) -> Self {
        let convs = vec![
            (Conv::new(format!("{prefix}.conv0"), 3, b, 4, 2, 1), None),
            (
                Conv::new(format!("{prefix}.conv1"), b, 2 * b, 4, 2, 1),
                Some(Norm::new(format!("{prefix}.norm1"), 2 * b)),
            ),
            (
                Conv::new(format!("{prefix}.conv2"), 2 * b, 4 * b, 4, 2, 1),
                Some(Norm::new(format!("{prefix}.norm2"), 4 * b)),
            ),
        ];
        Self {
            scale,
            convs,
            out: Conv::same3(format!("{prefix}.out"), 4 * b, 1),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let sh = g.shape(x);
        if sh.len() != 4 || sh[1] != 3 || sh[2] % 8 != 0 || sh[3] % 8 != 0 {
            return Err(Error::structure(
                self.convs[0].0.name.clone(),
                format!("input {sh:?} is not N x 3 x H x W with H, W divisible by 8"),
            ));
        }
        let mut h = x;
        for (conv, norm) in &self.convs {
            h = conv.forward(g, p, h)?;
            if let Some(n) = norm {
                h = n.forward(g, p, h)?;
            }
            h = g.leaky_relu(h, T::c(LEAKY_SLOPE));
        }
        self.out.forward(g, p, h)
    }
}

impl Architecture for Discriminator {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        for (conv, norm) in &self.convs {
            conv.register(&mut inv);
            if let Some(n) = norm {
                n.register(&mut inv);
            }
        }
        self.out.register(&mut inv);
        inv
    }
}

pub fn discriminator_forward<T: Float>(
    x: &Tensor<T>,
    scale: DiscScale,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let d = Discriminator::new(scale, "disc");
    params.check_against(&d.inventory().specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = d.forward(&mut g, &p, xv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::init_params;

    #[test]
    fn patch_grid_and_scaling() {
        let d = Discriminator::new(DiscScale::S, "disc");
        let params = init_params(&d.inventory().specs, 2).unwrap();
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i % 97) as f32 / 48.0) - 1.0);
        let y = discriminator_forward(&x, DiscScale::S, &params).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert_eq!(y, discriminator_forward(&x, DiscScale::S, &params).unwrap());
        let s = d.inventory().num_params();
        let l = Discriminator::new(DiscScale::L, "disc").inventory().num_params();
        assert!(l > s);
    }
}
