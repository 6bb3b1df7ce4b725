//! Adam with a constant learning rate and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Mat::zeros(p.value.rows, p.value.cols))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Frozen parameters are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) -> f64 {
        let norm = grads.global_norm();
        let clip = if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            self.cfg.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.g.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = params.get_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k] * clip;
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                w.data[k] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}
