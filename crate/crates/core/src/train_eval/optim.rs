use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

/// Global L2 norm over every trainable gradient.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, _, t)| t.requires_grad)
        .filter_map(|(_, _, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the factor applied (1 when under the threshold).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if let Some(g) = store.get_mut(id).grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    factor
}

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`. Steps are 1-indexed; past the end the rate stays 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        self.peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are indexed like the
/// parameter store; frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p.data[j] -= lr * (update + c.weight_decay * p.data[j]);
            }
        }
    }
}
