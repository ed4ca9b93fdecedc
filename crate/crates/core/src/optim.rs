//! Adam optimizer over slot-indexed tensors.
//!
//! The trainer walks its parameter struct in stable path order and calls
//! `update` with a running slot index; moment tensors live here, parallel to
//! that order, and serialize with checkpoints so training can resume exactly.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed steps (bias correction uses the post-increment count).
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let m = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        let v = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Adam { cfg, t: 0, m, v }
    }

    /// Start a new optimizer step; must precede the slot updates of the step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one slot's update in place.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "slot {slot} shape mismatch");
        assert!(self.t > 0, "begin_step must run before update");
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}
