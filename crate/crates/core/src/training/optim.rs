use std::f64::consts::PI;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::tensor::Float;

/// Linear warmup to `lr_peak`, then cosine decay to `lr_final` at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup: u64, lr_peak: f64, lr_final: f64) -> Result<f64> {
    if warmup >= total_steps {
        return Err(Error::config("optim.warmup", format!("warmup {warmup} must be below total steps {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::config("step", format!("step {step} beyond total steps {total_steps}")));
    }
    if step < warmup {
        return Ok(lr_peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(lr_final + 0.5 * (lr_peak - lr_final) * (1.0 + (PI * progress).cos()))
}

/// Schedule value for `step` under `cfg`.
pub fn lr_at(cfg: &OptimConfig, step: u64) -> Result<f64> {
    lr_schedule(step.min(cfg.total_steps), cfg.total_steps, cfg.warmup, cfg.lr, cfg.lr_final)
}

/// Global L2 norm over every tensor, accumulated in `f64`.
pub fn global_norm<T: Float>(grads: &ParamStore<T>) -> f64 {
    grads.iter().map(|(_, t)| t.sq_norm_f64()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients<T: Float>(grads: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::numeric(format!("non-finite gradient in `{name}`")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.scale_inplace(s);
        }
    }
    Ok(norm)
}

/// AdamW moments and hyperparameters for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Decoupled weight decay applies to tensors of rank two and above.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn adamw_update<T: Float>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    state.step = state
        .step
        .checked_add(1)
        .ok_or_else(|| Error::numeric("optimizer step counter overflow"))?;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Shape(format!("no first moment for `{name}`")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Shape(format!("optimizer shapes disagree for `{name}`")));
        }
        let wd = if decays(p.shape()) { state.weight_decay } else { 0.0 };
        let v = state.v.get_mut(name).ok_or_else(|| Error::Shape(format!("no second moment for `{name}`")))?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gf = gv.f64();
            let mn = b1 * mv.f64() + (1.0 - b1) * gf;
            let vn = b2 * vv.f64() + (1.0 - b2) * gf * gf;
            *mv = T::c(mn);
            *vv = T::c(vn);
            let mhat = mn / bc1;
            let vhat = vn / bc2;
            let pf = pv.f64();
            *pv = T::c(pf - lr * (mhat / (vhat.sqrt() + state.eps) + wd * pf));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_landmarks() {
        let lr = |s| lr_schedule(s, 100_000, 10_000, 1e-4, 1e-5).unwrap();
        assert_eq!(lr(10_000), 1e-4);
        assert!((lr(100_000) - 1e-5).abs() < 1e-18);
        assert!((lr(5_000) - 5e-5).abs() < 1e-18);
        assert!(lr_schedule(5, 10, 10, 1e-4, 1e-5).is_err());
    }

    #[test]
    fn clip_unit_vector() {
        let mut g = ParamStore::<f64>::new();
        g.insert("w", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 5.0);
        let d = g.get("w").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_names_non_finite_parameter() {
        let mut g = ParamStore::<f32>::new();
        g.insert("enc.conv_in.weight", Tensor::from_vec(&[1], vec![f32::NAN]).unwrap()).unwrap();
        match clip_gradients(&mut g, 1.0) {
            Err(Error::Numeric { message, .. }) => assert!(message.contains("enc.conv_in.weight")),
            other => panic!("{other:?}"),
        }
    }
}
