//! Adam with bias correction.

use crate::error::{invalid, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid("AdamConfig", format!("{self:?} needs 0 < beta < 1, eps > 0, lr >= 0")))
        }
    }
}

/// One Adam update of every parameter, using `configs[group]` for each
/// parameter's group. Gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, configs: &[AdamConfig]) -> Result<()> {
    for cfg in configs {
        cfg.validate()?;
    }
    for p in store.params_mut() {
        let cfg = configs
            .get(p.group())
            .ok_or_else(|| invalid("adam_step", format!("no config for group {}", p.group())))?;
        p.step += 1;
        let t = p.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let one = T::one();
        let value = std::sync::Arc::make_mut(&mut p.value);
        for (((x, g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(p.grad.iter_mut())
            .zip(p.m.iter_mut())
            .zip(p.v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * *g;
            *vi = b2 * *vi + (one - b2) * *g * *g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}
