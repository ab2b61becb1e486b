use super::tensor::{cst, Scalar, Tensor};
use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp length in steps; 0 disables warmup.
    pub warmup: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, warmup: 0 }
    }
}

/// AdamW with bias correction and decoupled weight decay on matrices (rank >= 2).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Learning rate used by the next step.
    pub fn effective_lr(&self) -> f64 {
        if self.config.warmup == 0 {
            self.config.lr
        } else {
            self.config.lr * (self.step as f64 / self.config.warmup as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.step_masked(params, grads, None)
    }

    /// Update only parameters with `trainable[i]`; others keep values and moments.
    pub fn step_masked(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], trainable: Option<&[bool]>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("optimizer gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if p.shape != g.shape {
                return Err(Error::shape(format!("gradient of {}", params.name(i)), format!("{:?}", p.shape), format!("{:?}", g.shape)));
            }
            let active = trainable.is_none_or(|t| t[i]);
            if active && !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
            }
        }
        let lr: T = cst(self.effective_lr());
        let c = self.config;
        let t = (self.step + 1) as f64;
        let bc1: T = cst(1.0 - c.beta1.powf(t));
        let bc2: T = cst(1.0 - c.beta2.powf(t));
        let (b1, b2, eps, wd): (T, T, T, T) = (cst(c.beta1), cst(c.beta2), cst(c.eps), cst(c.weight_decay));
        let one = T::one();
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let decay = p.shape.len() >= 2 && c.weight_decay != 0.0;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let mut x = p.data[j];
                if decay {
                    x = x - lr * wd * x;
                }
                p.data[j] = x - lr * mh / (vh.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamW<U> {
        AdamW {
            config: self.config,
            step: self.step,
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
        }
    }
}
