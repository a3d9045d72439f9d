//! Adam with per-parameter state kept in f64, keyed by parameter name so
//! checkpoints can carry it exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Param;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    /// One update of `param` under its `name`d state. Arithmetic runs in
    /// f64; only the final value is rounded into the f32 weights.
    pub fn step(&mut self, name: &str, param: &mut Param, grad: &[f64], lr: f64) {
        let n = param.value.numel();
        assert_eq!(grad.len(), n, "gradient length for '{name}'");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        assert_eq!(slot.m.len(), n, "state length for '{name}'");
        slot.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(slot.t as i32);
        let bc2 = 1.0 - b2.powi(slot.t as i32);
        for i in 0..n {
            let g = grad[i];
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
            let mh = slot.m[i] / bc1;
            let vh = slot.v[i] / bc2;
            let w = param.value.data[i] as f64 - lr * mh / (vh.sqrt() + eps);
            param.value.data[i] = w as f32;
        }
    }
}

/// Exponential decay from `lr_start` to `lr_end` over `total` steps.
pub fn lr_schedule(lr_start: f64, lr_end: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    lr_start * (lr_end / lr_start).powf(step as f64 / total as f64)
}
