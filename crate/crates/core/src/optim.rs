//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update of every tensor in `params` with `grads` (same order).
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.names(), self.m.names(), "optimizer state belongs to another parameter set");
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (ms, vs) = (self.m.tensors_mut(), self.v.tensors_mut());
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(ms).zip(vs) {
            assert_eq!(p.shape(), g.shape());
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// `initial · decay^floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepDecay {
    pub initial_lr: f64,
    pub decay: f64,
    pub every_epochs: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            initial_lr: 0.001,
            decay: 0.95,
            every_epochs: 5,
        }
    }
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay.powi((epoch / self.every_epochs.max(1)) as i32)
    }
}
