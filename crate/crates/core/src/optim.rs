//! SGD with momentum and L2 weight decay, and the poly learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// `base_lr · (1 − iter/max_iter)^0.9`, zero from `max_iter` on.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(0.9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.base_lr) {
            return Err(Error::Config(format!(
                "optim.base_lr: {} is invalid",
                self.base_lr
            )));
        }
        if !ok(self.momentum) || self.momentum >= 1.0 {
            return Err(Error::Config(format!(
                "optim.momentum: {} not in [0, 1)",
                self.momentum
            )));
        }
        if !ok(self.weight_decay) {
            return Err(Error::Config(format!(
                "optim.weight_decay: {} is invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers mirroring a parameter store.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub cfg: SgdConfig,
    pub velocity: Vec<Vec<T>>,
    pub steps: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig, params: &ParamStore<T>) -> Self {
        Sgd {
            cfg,
            velocity: params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect(),
            steps: 0,
        }
    }

    /// `g' = g + λw; v ← µv + g'; w ← w − lr·v`. Rejects the whole step,
    /// leaving parameters and buffers untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[&[T]], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::dim(
                "sgd_step",
                format!(
                    "{} gradients for {} parameters",
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for ((name, t), g) in params.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::shapes("sgd_step", t.shape(), &[g.len()]));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] is {}",
                    g[i]
                )));
            }
        }
        let (mu, wd, lr) = (
            T::lit(self.cfg.momentum),
            T::lit(self.cfg.weight_decay),
            T::lit(lr),
        );
        for ((w, v), g) in params.tensors_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, v), &g) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                let g = g + wd * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        self.steps += 1;
        Ok(())
    }
}
