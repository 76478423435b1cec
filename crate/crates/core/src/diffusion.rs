//! Linear-interpolation noising path and the conditional Euler sampler.
//!
//! States follow `x_t = (1 - t) x0 + t eps` with `t = 0` the data and `t = 1`
//! pure noise. Networks predict the velocity `v = eps - x0`, from which both
//! the clean image and the score are recovered in closed form.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{condition_upsample, Architecture, ModelParams, UNet};
use crate::rng;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CHURN: f64 = 0.5;

/// A noised batch together with the time and noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState<T = f32> {
    pub x_t: Tensor<T>,
    pub t: Vec<f64>,
    pub eps: Tensor<T>,
}

fn per_item<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    t: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor<T>> {
    a.expect_same_shape(b, "diffusion operands")?;
    let n = a.dim(0);
    if t.len() != n {
        return Err(Error::Shape(format!("{} times for batch of {n}", t.len())));
    }
    let per = a.len() / n.max(1);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(j, (&x, &y))| T::c(f(x.f64(), y.f64(), t[j / per])))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// `x_t = (1 - t) x0 + t eps`.
pub fn forward_noise<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("diffusion time {bad} outside [0, 1]")));
    }
    per_item(x0, eps, t, |x, e, t| (1.0 - t) * x + t * e)
}

impl<T: Float> DiffusionState<T> {
    pub fn new(x0: &Tensor<T>, eps: Tensor<T>, t: Vec<f64>) -> Result<Self> {
        let x_t = forward_noise(x0, &eps, &t)?;
        Ok(Self { x_t, t, eps })
    }
}

/// Single-step clean-image prediction `x0' = x_t - t v`.
pub fn predict_x0<T: Float>(x_t: &Tensor<T>, t: &[f64], v: &Tensor<T>) -> Result<Tensor<T>> {
    per_item(x_t, v, t, |x, v, t| x - t * v)
}

pub fn predict_x0_graph<T: Float>(g: &mut Graph<T>, x_t: Var, t: &[f64], v: Var) -> Result<Var> {
    let w: Vec<T> = t.iter().map(|&s| T::c(s)).collect();
    let tv = g.mul_per_sample(v, &w)?;
    g.sub(x_t, tv)
}

/// Score of the noising kernel, `-(x_t + (1 - t) v) / t`.
pub fn score_from_velocity<T: Float>(v: &Tensor<T>, x_t: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if let Some(bad) = t.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::Domain(format!("score undefined at t = {bad}")));
    }
    per_item(x_t, v, t, |x, v, t| -(x + (1.0 - t) * v) / t)
}

/// Velocity of the interpolation path: `v* = eps - x0`.
pub fn velocity_target<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.zip_map(x0, |e, x| e - x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Re-inject fresh noise after each step instead of integrating deterministically.
    pub stochastic: bool,
    /// Fraction of the noise estimate replaced by fresh noise in stochastic mode.
    pub churn: f64,
    pub noise_seed: u64,
    pub rng_stream: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_STEPS,
            stochastic: false,
            churn: DEFAULT_CHURN,
            noise_seed: 0,
            rng_stream: "sample".into(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::config("sampler.steps", "need at least one step"));
        }
        if !(0.0..=1.0).contains(&self.churn) {
            return Err(Error::config("sampler.churn", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A velocity field `v(x, t, cond)` evaluated batch-wise.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor<f32>, t: &[f64], cond: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor<f32>, &[f64], &Tensor<f32>) -> Result<Tensor<f32>>,
{
    fn velocity(&self, x: &Tensor<f32>, t: &[f64], cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(x, t, cond)
    }
}

/// A trained U-Net as a velocity field.
pub struct UNetField<'a> {
    pub net: UNet,
    pub params: &'a ModelParams,
}

impl<'a> UNetField<'a> {
    pub fn new(net: UNet, params: &'a ModelParams) -> Result<Self> {
        params.check_against(&net.inventory().specs)?;
        Ok(Self { net, params })
    }
}

impl VelocityField for UNetField<'_> {
    fn velocity(&self, x: &Tensor<f32>, t: &[f64], cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let v = self.net.forward(&mut g, &p, xv, t, cv)?;
        Ok(g.value(v).clone())
    }
}

/// Integrate from `x1` at `t = 1` down to `t = 0` with `num_steps` Euler steps
/// on the uniform grid `t_k = k / num_steps`, then clamp to `[-1, 1]`.
///
/// Item `i` of the batch uses churn noise from stream
/// `(cfg.noise_seed, cfg.rng_stream + "/churn", item_offset + i)`.
pub fn sample_from(
    z: &Tensor<f32>,
    cfg: &SamplerConfig,
    field: &impl VelocityField,
    f: usize,
    x1: Tensor<f32>,
    item_offset: u64,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let cond = condition_upsample(z, f)?;
    if cond.shape()[0] != x1.shape()[0] || cond.shape()[2..] != x1.shape()[2..] {
        return Err(Error::Shape(format!(
            "initial noise {:?} does not match upsampled condition {:?}",
            x1.shape(),
            cond.shape()
        )));
    }
    let n = x1.dim(0);
    let mut churn_rngs: Vec<_> = (0..n)
        .map(|i| rng::stream(cfg.noise_seed, &format!("{}/churn", cfg.rng_stream), item_offset + i as u64))
        .collect();
    let steps = cfg.num_steps;
    let mut x = x1;
    for k in (1..=steps).rev() {
        let tk = k as f64 / steps as f64;
        let tprev = (k - 1) as f64 / steps as f64;
        let t = vec![tk; n];
        let v = field.velocity(&x, &t, &cond)?;
        x.expect_same_shape(&v, "velocity")?;
        if cfg.stochastic && k > 1 {
            let gamma = cfg.churn;
            let keep = (1.0 - gamma * gamma).sqrt();
            let per = x.len() / n;
            let xd = x.data_mut();
            for (i, r) in churn_rngs.iter_mut().enumerate() {
                for j in i * per..(i + 1) * per {
                    let (xv, vv) = (xd[j] as f64, v.data()[j] as f64);
                    let x0 = xv - tk * vv;
                    let eps = xv + (1.0 - tk) * vv;
                    let fresh = rng::normal(r);
                    xd[j] = ((1.0 - tprev) * x0 + tprev * (keep * eps + gamma * fresh)) as f32;
                }
            }
        } else {
            let dt = (tk - tprev) as f32;
            for (xv, &vv) in x.data_mut().iter_mut().zip(v.data()) {
                *xv -= dt * vv;
            }
        }
        if !x.all_finite() {
            return Err(Error::numeric(format!("sampler produced non-finite values at t = {tk}")));
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Initial noise for items `item_offset..item_offset + n`, one stream per item.
pub fn initial_noise(cfg: &SamplerConfig, shape: &[usize], item_offset: u64) -> Tensor<f32> {
    rng::per_item_normal(cfg.noise_seed, &cfg.rng_stream, item_offset, shape)
}

/// Decode latents `z` to images of size `f` times the latent grid.
pub fn sample(
    z: &Tensor<f32>,
    cfg: &SamplerConfig,
    field: &impl VelocityField,
    f: usize,
    item_offset: u64,
) -> Result<Tensor<f32>> {
    if z.rank() != 4 {
        return Err(Error::Shape(format!("latent {:?} is not rank 4", z.shape())));
    }
    let shape = [z.dim(0), 3, z.dim(2) * f, z.dim(3) * f];
    let x1 = initial_noise(cfg, &shape, item_offset);
    sample_from(z, cfg, field, f, x1, item_offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_endpoints_and_arithmetic() {
        let x0 = Tensor::from_vec(&[1, 1], vec![0.2f64]).unwrap();
        let e = Tensor::from_vec(&[1, 1], vec![-1.0f64]).unwrap();
        assert_eq!(forward_noise(&x0, &e, &[0.0]).unwrap(), x0);
        assert_eq!(forward_noise(&x0, &e, &[1.0]).unwrap(), e);
        let xt = forward_noise(&x0, &e, &[0.7]).unwrap();
        assert!((xt.data()[0] + 0.64).abs() < 1e-15);
        let v = Tensor::from_vec(&[1, 1], vec![-1.2f64]).unwrap();
        assert!((predict_x0(&xt, &[0.7], &v).unwrap().data()[0] - 0.2).abs() < 1e-15);
        let s = score_from_velocity(&v, &xt, &[0.7]).unwrap();
        assert!((s.data()[0] - 1.0 / 0.7).abs() < 1e-12);
        assert!(forward_noise(&x0, &e, &[1.5]).is_err());
        assert!(score_from_velocity(&v, &xt, &[0.0]).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = SamplerConfig {
            num_steps: 0,
            ..Default::default()
        };
        let z = Tensor::zeros(&[1, 1, 1, 1]);
        let field = |x: &Tensor<f32>, _: &[f64], _: &Tensor<f32>| Ok(Tensor::zeros(x.shape()));
        assert!(matches!(sample(&z, &cfg, &field, 2, 0), Err(Error::Config { .. })));
    }
}
