use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (c.lr / bc1) as f32;
        let sqrt_bc2 = bc2.sqrt() as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            if self.m[id].len() != n {
                self.m[id] = vec![0.0; n];
                self.v[id] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() / sqrt_bc2 + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// SGD with classical momentum: `v ← μv − lr·g; w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    vel: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, vel: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let (lr, mu) = (self.cfg.lr as f32, self.cfg.momentum as f32);
        if self.vel.len() < store.len() {
            self.vel.resize(store.len(), Vec::new());
        }
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if self.vel[id].len() != p.value.numel() {
                self.vel[id] = vec![0.0; p.value.numel()];
            }
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(self.vel[id].iter_mut()) {
                *vi = mu * *vi - lr * gi;
                *w += *vi;
            }
        }
    }
}
