//! AdamW with a cosine-annealed learning rate.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::engine::{Gradients, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::layers::Module;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Floor reached at the end of the cosine schedule.
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight decay must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("min_lr must lie in [0, lr], got {}", self.min_lr)));
        }
        Ok(())
    }
}

/// `min + (max - min) (1 + cos(pi t / T)) / 2` for step `t` of `total`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * t).cos())
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Decoupled weight decay Adam. Decay is applied to every parameter.
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub total_steps: usize,
    step: usize,
    state: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, total_steps: usize) -> Self {
        Self {
            config,
            total_steps,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.lr, self.config.min_lr, self.step, self.total_steps)
    }

    pub fn step(&mut self, model: &mut impl Module<T>, grads: &Gradients<T>) {
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let state = &mut self.state;
        model.visit_params_mut(&mut |p| {
            let Some(g) = grads.param(p.key()) else {
                return;
            };
            let st = state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * m[i] / denom;
            }
        });
    }
}
