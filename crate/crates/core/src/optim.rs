//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    /// Peak learning rate, reached at `step == warmup_steps`.
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 4000,
        }
    }
}

impl AdamConfig {
    /// `base_lr · min(step^-0.5, step · warmup^-1.5) · warmup^0.5`
    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.base_lr * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    /// One Adam update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<f64> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam_step", "gradient count differs from parameter count"));
        }
        self.step = self
            .step
            .checked_add(1)
            .ok_or_else(|| Error::InvalidArgument("adam step counter overflow".into()))?;
        let c = self.config;
        let lr = c.learning_rate(self.step);
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, eps) = (S::one(), S::of(c.eps));
        let step_size = S::of(lr / bc1);
        let bc2_sqrt = S::of(bc2.sqrt());

        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.grads[i];
            let p = params.get_mut(id);
            if !p.same_shape(g) {
                return Err(Error::shape("adam_step", format!("{:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(lr)
    }
}
