use super::layers::{Conv, Dense, Inventory};
use super::params::{Bound, ModelParams, ParamStore};
use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const FEATURE_WIDTHS: [usize; 3] = [16, 32, 64];

/// Small convolutional classifier whose block outputs serve as perceptual features.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub widths: [usize; 3],
    pub num_shape_classes: usize,
    pub num_color_classes: usize,
    blocks: Vec<(Conv, Conv)>,
    shape_head: Dense,
    color_head: Dense,
}

/// Graph handles of a feature-net forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub features: [Var; 3],
    pub shape_logits: Var,
    pub color_logits: Var,
}

impl FeatureNet {
    pub fn new(num_shape_classes: usize, num_color_classes: usize) -> Self {
        Self::with_widths(FEATURE_WIDTHS, num_shape_classes, num_color_classes)
    }

    pub fn with_widths(widths: [usize; 3], num_shape_classes: usize, num_color_classes: usize) -> Self {
        let mut ch = 3;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = (
                    Conv::new(format!("feat.block{i}.conv0"), ch, w, 3, 2, 1),
                    Conv::same3(format!("feat.block{i}.conv1"), w, w),
                );
                ch = w;
                b
            })
            .collect();
        Self {
            widths,
            num_shape_classes,
            num_color_classes,
            blocks,
            shape_head: Dense::new("feat.shape_head", ch, num_shape_classes),
            color_head: Dense::new("feat.color_head", ch, num_color_classes),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<FeatureVars> {
        let sh = g.shape(x);
        if sh.len() != 4 || sh[1] != 3 || sh[2] % 8 != 0 || sh[3] % 8 != 0 {
            return Err(Error::structure(
                "feat.block0.conv0",
                format!("input {sh:?} is not N x 3 x H x W with H, W divisible by 8"),
            ));
        }
        let mut h = x;
        let mut feats = Vec::with_capacity(3);
        for (c0, c1) in &self.blocks {
            h = c0.forward(g, p, h)?;
            h = g.silu(h);
            h = c1.forward(g, p, h)?;
            h = g.silu(h);
            feats.push(h);
        }
        let pooled = g.mean_spatial(h)?;
        let shape_logits = self.shape_head.forward(g, p, pooled)?;
        let color_logits = self.color_head.forward(g, p, pooled)?;
        Ok(FeatureVars {
            features: [feats[0], feats[1], feats[2]],
            shape_logits,
            color_logits,
        })
    }
}

impl Architecture for FeatureNet {
    fn inventory(&self) -> Inventory {
        let mut inv = Inventory::default();
        for (c0, c1) in &self.blocks {
            c0.register(&mut inv);
            c1.register(&mut inv);
        }
        self.shape_head.register(&mut inv);
        self.color_head.register(&mut inv);
        inv
    }
}

/// Frozen feature network with its training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub widths: [usize; 3],
    pub num_shape_classes: usize,
    pub num_color_classes: usize,
    pub params: ModelParams,
    /// Classifier training steps; zero means untrained.
    pub trained_steps: u64,
}

impl FeatureExtractor {
    pub fn net(&self) -> FeatureNet {
        FeatureNet::with_widths(self.widths, self.num_shape_classes, self.num_color_classes)
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::config(
                "features",
                "feature extractor is untrained; train it before using perceptual or Frechet terms",
            ))
        }
    }

    /// Mean-pooled deepest features, `N x widths[2]`.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        let out = feature_extractor_forward(x, &self.net(), &self.params)?;
        let f = &out.features[2];
        let (n, c) = (f.dim(0), f.dim(1));
        let s = f.dim(2) * f.dim(3);
        let mut emb = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let src = f.outer(i);
            let row = emb.outer_mut(i);
            for (k, r) in row.iter_mut().enumerate() {
                *r = src[k * s..(k + 1) * s].iter().map(|v| *v as f64).sum::<f64>() / s as f64;
            }
        }
        Ok(emb)
    }
}

/// Feature maps at three depths plus class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput<T> {
    pub features: [Tensor<T>; 3],
    pub shape_logits: Tensor<T>,
    pub color_logits: Tensor<T>,
}

pub fn feature_extractor_forward<T: Float>(
    x: &Tensor<T>,
    net: &FeatureNet,
    params: &ParamStore<T>,
) -> Result<FeatureOutput<T>> {
    params.check_against(&net.inventory().specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let o = net.forward(&mut g, &p, xv)?;
    Ok(FeatureOutput {
        features: o.features.map(|v| g.value(v).clone()),
        shape_logits: g.value(o.shape_logits).clone(),
        color_logits: g.value(o.color_logits).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::init_params;

    #[test]
    fn spatial_sizes_and_heads() {
        let net = FeatureNet::new(6, 8);
        let params = init_params(&net.inventory().specs, 9).unwrap();
        let x = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i as f32) * 0.013).sin());
        let out = feature_extractor_forward(&x, &net, &params).unwrap();
        assert_eq!(out.features[0].shape(), &[2, 16, 32, 32]);
        assert_eq!(out.features[1].shape(), &[2, 32, 16, 16]);
        assert_eq!(out.features[2].shape(), &[2, 64, 8, 8]);
        assert_eq!(out.shape_logits.shape(), &[2, 6]);
        assert_eq!(out.color_logits.shape(), &[2, 8]);
        assert_eq!(out, feature_extractor_forward(&x, &net, &params).unwrap());
    }

    #[test]
    fn untrained_is_flagged() {
        let net = FeatureNet::new(6, 8);
        let fx = FeatureExtractor {
            widths: FEATURE_WIDTHS,
            num_shape_classes: 6,
            num_color_classes: 8,
            params: init_params(&net.inventory().specs, 1).unwrap(),
            trained_steps: 0,
        };
        assert!(fx.require_trained().is_err());
    }
}
