//! Training objectives.
//!
//! Each loss comes in two forms: a plain function on tensors that returns an
//! `f64`, and a graph builder returning a scalar [`Var`] for backpropagation.
//! Both compute the same quantity; the plain forms are what tests and metrics use.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, FeatureExtractor, FeatureNet, LatentPosterior};
use crate::rng;
use crate::tensor::{Float, Tensor};

pub const PERCEPTUAL_EPS: f64 = 1e-10;

/// Term names as they appear in logs and reports.
pub const TERM_DSM: &str = "dsm";
pub const TERM_REC: &str = "rec";
pub const TERM_KL: &str = "kl";
pub const TERM_LPIPS: &str = "lpips";
pub const TERM_GAN_G: &str = "gan_g";
pub const TERM_GAN_D: &str = "gan_d";

fn check_finite<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite values in {what}")))
    }
}

/// Batch mean of `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence<T: Float>(post: &LatentPosterior<T>) -> Result<f64> {
    post.mu.expect_same_shape(&post.logvar, "posterior")?;
    check_finite(&post.mu, "posterior mean")?;
    check_finite(&post.logvar, "posterior log-variance")?;
    let n = post.mu.dim(0).max(1);
    let s: f64 = post
        .mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.f64(), lv.f64());
            m * m + lv.exp() - 1.0 - lv
        })
        .sum();
    Ok(0.5 * s / n as f64)
}

pub fn kl_graph<T: Float>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.shape(mu)[0].max(1);
    let m2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let a = g.add(m2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, T::c(-1.0));
    let s = g.sum(c);
    Ok(g.scale(s, T::c(0.5 / n as f64)))
}

/// Mean squared error over all elements.
pub fn l2_reconstruction<T: Float>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(x_hat, "reconstruction")?;
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(s / x.len().max(1) as f64)
}

pub fn l2_graph<T: Float>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = g.sub(x_hat, x)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

fn check_times(t: &[f64], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::Shape(format!("{} times for batch of {n}", t.len())));
    }
    if let Some(bad) = t.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Domain(format!("diffusion time {bad} outside (0, 1]")));
    }
    Ok(())
}

/// Uniform time weighting.
pub fn unit_weight(_t: f64) -> f64 {
    1.0
}

/// Batch mean of `w(t_i) * mean((v_pred - (eps - x0))^2)`.
pub fn dsm_velocity_loss<T: Float>(
    v_pred: &Tensor<T>,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: &[f64],
    weight_fn: impl Fn(f64) -> f64,
) -> Result<f64> {
    v_pred.expect_same_shape(x0, "velocity prediction")?;
    v_pred.expect_same_shape(eps, "noise")?;
    let n = v_pred.dim(0);
    check_times(t, n)?;
    let per = v_pred.len() / n.max(1);
    let mut total = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        let s: f64 = (0..per)
            .map(|k| {
                let j = i * per + k;
                let d = v_pred.data()[j].f64() - (eps.data()[j].f64() - x0.data()[j].f64());
                d * d
            })
            .sum();
        total += weight_fn(ti) * s / per as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Graph form of [`dsm_velocity_loss`]; `target` is the constant `eps - x0`.
pub fn dsm_graph<T: Float>(
    g: &mut Graph<T>,
    v_pred: Var,
    target: Var,
    t: &[f64],
    weight_fn: impl Fn(f64) -> f64,
) -> Result<Var> {
    let n = g.shape(v_pred)[0];
    check_times(t, n)?;
    let d = g.sub(v_pred, target)?;
    let sq = g.mul(d, d)?;
    let w: Vec<T> = t.iter().map(|&ti| T::c(weight_fn(ti))).collect();
    let weighted = if w.iter().all(|&v| v == T::one()) {
        sq
    } else {
        g.mul_per_sample(sq, &w)?
    };
    Ok(g.mean(weighted))
}

/// Sum over feature depths of the mean squared difference between
/// spatially L2-normalized feature maps.
pub fn perceptual_graph<T: Float>(
    g: &mut Graph<T>,
    net: &FeatureNet,
    feat: &Bound,
    a: Var,
    b: Var,
) -> Result<Var> {
    let fa = net.forward(g, feat, a)?;
    let fb = net.forward(g, feat, b)?;
    let mut total: Option<Var> = None;
    for (&va, &vb) in fa.features.iter().zip(&fb.features) {
        let na = g.spatial_l2_normalize(va, PERCEPTUAL_EPS)?;
        let nb = g.spatial_l2_normalize(vb, PERCEPTUAL_EPS)?;
        let d = g.sub(na, nb)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("three feature depths"))
}

pub fn perceptual_loss(x0_pred: &Tensor<f32>, x: &Tensor<f32>, fx: &FeatureExtractor) -> Result<f64> {
    fx.require_trained()?;
    x0_pred.expect_same_shape(x, "perceptual inputs")?;
    let mut g = Graph::<f32>::new();
    let p = fx.params.bind(&mut g, false);
    let a = g.constant(x0_pred.clone());
    let b = g.constant(x.clone());
    let l = perceptual_graph(&mut g, &fx.net(), &p, a, b)?;
    Ok(g.value(l).item().f64())
}

/// Hinge losses `(d_loss, g_loss)`.
pub fn gan_hinge_losses<T: Float>(logits_real: &Tensor<T>, logits_fake: &Tensor<T>) -> Result<(f64, f64)> {
    check_finite(logits_real, "real logits")?;
    check_finite(logits_fake, "fake logits")?;
    let mean = |t: &Tensor<T>, f: &dyn Fn(f64) -> f64| {
        t.data().iter().map(|v| f(v.f64())).sum::<f64>() / t.len().max(1) as f64
    };
    let d = mean(logits_real, &|v| (1.0 - v).max(0.0)) + mean(logits_fake, &|v| (1.0 + v).max(0.0));
    let gl = -mean(logits_fake, &|v| v);
    Ok((d, gl))
}

pub fn hinge_d_graph<T: Float>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.scale(real, T::c(-1.0));
    let r = g.add_scalar(r, T::one());
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, T::one());
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f).expect("scalars")
}

pub fn hinge_g_graph<T: Float>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, T::c(-1.0))
}

/// Weights of the reconstruction/DSM, KL, perceptual and GAN terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn dgae_default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-6,
            eta: 0.1,
            lambda: 0.0,
        }
    }

    pub fn baseline_default() -> Self {
        Self {
            lambda: 0.5,
            ..Self::dgae_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.eta", self.eta),
            ("loss.lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(k, format!("weight {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn validate_dgae(&self) -> Result<()> {
        self.validate()?;
        if self.lambda != 0.0 {
            return Err(Error::config("loss.lambda", "the diffusion objective has no GAN term; lambda must be 0"));
        }
        Ok(())
    }
}

/// Weighted total with its per-term values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VaeTerms {
    pub rec: f64,
    pub kl: f64,
    pub lpips: f64,
    pub gan: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DgaeTerms {
    pub dsm: f64,
    pub kl: f64,
    pub lpips: f64,
}

/// `alpha * rec + beta * kl + eta * lpips + lambda * gan`.
pub fn vae_total_loss(terms: &VaeTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let total = w.alpha * terms.rec + w.beta * terms.kl + w.eta * terms.lpips + w.lambda * terms.gan;
    Ok(LossReport {
        step: 0,
        total,
        terms: [
            (TERM_REC, terms.rec),
            (TERM_KL, terms.kl),
            (TERM_LPIPS, terms.lpips),
            (TERM_GAN_G, terms.gan),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    })
}

/// `alpha * dsm + beta * kl + eta * lpips`.
pub fn dgae_total_loss(terms: &DgaeTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate_dgae()?;
    let total = w.alpha * terms.dsm + w.beta * terms.kl + w.eta * terms.lpips;
    Ok(LossReport {
        step: 0,
        total,
        terms: [(TERM_DSM, terms.dsm), (TERM_KL, terms.kl), (TERM_LPIPS, terms.lpips)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    })
}

/// `sum_i w_i * term_i` on the graph; zero-weight terms are left out.
pub fn weighted_sum<T: Float>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, T::c(w));
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// Monte Carlo estimate of `E_q[log p(x|z)]` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// `(1/J) sum_j log p(x | z_j)` with `z_j` drawn from the encoder's posterior.
pub fn elbo_monte_carlo<R: Rng + ?Sized>(
    x: &Tensor<f64>,
    encoder: impl Fn(&Tensor<f64>) -> Result<LatentPosterior<f64>>,
    log_likelihood_fn: impl Fn(&Tensor<f64>, &Tensor<f64>) -> f64,
    j: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if j < 1 {
        return Err(Error::config("samples", "need at least one Monte Carlo sample"));
    }
    let post = encoder(x)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..j {
        let noise: Tensor<f64> = rng::normal_tensor(rng, post.mu.shape());
        let z = crate::nets::reparameterize(&post, &noise)?;
        let ll = log_likelihood_fn(x, &z);
        sum += ll;
        sum_sq += ll * ll;
    }
    let mean = sum / j as f64;
    let var = if j > 1 {
        ((sum_sq - j as f64 * mean * mean) / (j - 1) as f64).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err: (var / j as f64).sqrt(),
        samples: j,
    })
}

/// `log N(x; mean, sigma^2 I)` summed over elements.
pub fn gaussian_log_likelihood(x: &Tensor<f64>, mean: &Tensor<f64>, sigma: f64) -> Result<f64> {
    x.expect_same_shape(mean, "gaussian likelihood")?;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    Ok(x
        .data()
        .iter()
        .zip(mean.data())
        .map(|(&a, &m)| {
            let r = (a - m) / sigma;
            norm - 0.5 * r * r
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let kl = |m, lv| {
            kl_divergence(&LatentPosterior {
                mu: t1(m),
                logvar: t1(lv),
            })
            .unwrap()
        };
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((kl(0.0, 1.0) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn kl_graph_matches_plain() {
        let mu = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.3).sin());
        let lv = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.2).cos() - 0.5);
        let want = kl_divergence(&LatentPosterior {
            mu: mu.clone(),
            logvar: lv.clone(),
        })
        .unwrap();
        let mut g = Graph::new();
        let (m, l) = (g.constant(mu), g.constant(lv));
        let k = kl_graph(&mut g, m, l).unwrap();
        assert!((g.value(k).item() - want).abs() < 1e-12);
    }

    #[test]
    fn hinge_cases() {
        let c = |v: f64| Tensor::full(&[1, 1, 2, 2], v);
        assert_eq!(gan_hinge_losses(&c(2.0), &c(-2.0)).unwrap().0, 0.0);
        assert_eq!(gan_hinge_losses(&c(0.0), &c(0.0)).unwrap(), (2.0, 0.0));
        assert_eq!(gan_hinge_losses(&c(0.0), &c(3.0)).unwrap().1, -3.0);
    }

    #[test]
    fn totals() {
        let w = LossWeights {
            alpha: 1.0,
            beta: 1e-6,
            eta: 0.5,
            lambda: 0.5,
        };
        let r = vae_total_loss(
            &VaeTerms {
                rec: 0.5,
                kl: 0.1,
                lpips: 0.2,
                gan: 0.3,
            },
            &w,
        )
        .unwrap();
        assert!((r.total - 0.7500001).abs() < 1e-12);
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.5,
            eta: 0.25,
            lambda: 0.0,
        };
        let r = dgae_total_loss(
            &DgaeTerms {
                dsm: 1.0,
                kl: 2.0,
                lpips: 3.0,
            },
            &w,
        )
        .unwrap();
        assert_eq!(r.total, 2.75);
        let bad = LossWeights { lambda: 0.1, ..w };
        assert!(matches!(
            dgae_total_loss(&DgaeTerms::default(), &bad),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn dsm_rejects_zero_time() {
        let z = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(matches!(
            dsm_velocity_loss(&z, &z, &z, &[0.0], unit_weight),
            Err(Error::Domain(_))
        ));
        let one = Tensor::full(&[1, 3, 2, 2], 1.0);
        assert_eq!(dsm_velocity_loss(&z, &z, &one, &[0.5], unit_weight).unwrap(), 1.0);
    }
}
