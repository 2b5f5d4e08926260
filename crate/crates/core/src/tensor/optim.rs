use std::collections::BTreeMap;

use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter; a parameter with a non-finite gradient is skipped for that
/// step (buffers untouched) and the skip is counted.
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped_count(&self) -> u64 {
        self.skipped
    }

    /// Apply one update for every parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        for (name, grad) in grads {
            let Ok(param) = params.get_mut(name) else {
                continue;
            };
            if !grad.all_finite() {
                self.skipped += 1;
                log::warn!("adam: skipping non-finite gradient for `{name}`");
                continue;
            }
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = param.data_mut();
            for j in 0..n {
                let g = grad.data()[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] -= (self.cfg.lr as f64 * mhat / (vhat.sqrt() + self.cfg.eps as f64)) as f32;
            }
        }
    }
}
