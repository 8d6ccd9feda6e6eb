//! Adam with gradient-coupled L2 decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay·θ` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Every gradient is checked before any parameter changes,
    /// so a non-finite gradient leaves the parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} slots, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of {} is {:?}", p.name, g.shape()),
                ));
            }
            if let Some(index) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", p.name),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let (bc1, bc2) = (T::c(1.0 - c.beta1.powi(t)), T::c(1.0 - c.beta2.powi(t)));
        let (lr, eps, wd) = (T::c(lr), T::c(c.eps), T::c(c.weight_decay));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + wd * *x;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

/// Linear warmup to `base_lr`, then half-cosine decay towards zero.
pub fn lr_schedule(epoch: usize, s: &Schedule) -> f64 {
    if epoch < s.warmup_epochs {
        return s.base_lr * (epoch + 1) as f64 / s.warmup_epochs as f64;
    }
    let span = (s.total_epochs - s.warmup_epochs) as f64;
    let t = (epoch - s.warmup_epochs) as f64 / span;
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
