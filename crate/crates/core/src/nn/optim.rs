use serde::{Deserialize, Serialize};

use super::Layer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f32,
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

/// Adam with bias correction. Moments live on each `Param`, so one optimizer
/// can step any set of layers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, lr: f32, layers: &mut [&mut dyn Layer]) {
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for layer in layers.iter_mut() {
            layer.visit("", &mut |_, p| {
                if !p.is_trainable() {
                    return;
                }
                if p.m.len() != p.value.len() {
                    p.m = vec![0.0; p.value.len()];
                    p.v = vec![0.0; p.value.len()];
                }
                for i in 0..p.value.len() {
                    let g = p.grad[i] + weight_decay * p.value[i];
                    p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                    p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                    let mh = p.m[i] / c1;
                    let vh = p.v[i] / c2;
                    p.value[i] -= lr * mh / (vh.sqrt() + eps);
                }
                p.zero_grad();
            });
        }
    }
}
