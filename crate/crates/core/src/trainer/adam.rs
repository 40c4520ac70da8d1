use serde::{Deserialize, Serialize};

use crate::nets::{Grads, ParamSet};

/// Adam moment coefficients and step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, v)| vec![0.0; v.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|(((_, _, p), m), v)| p.len() == m.len() && p.len() == v.len())
    }

    /// One bias-corrected update of every parameter in `params`.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}
