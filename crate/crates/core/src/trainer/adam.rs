use serde::{Deserialize, Serialize};

use crate::networks::{NetworkGrads, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            p.push(format!("adam.eps must be finite and > 0, got {}", self.eps));
        }
        p
    }
}

/// First and second moments of one network, flattened in
/// [`NetworkParams::values`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn step(&mut self, params: &mut NetworkParams<f32>, grads: &NetworkGrads<f32>, lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.eps * c2.sqrt()) as f32;
        let mut k = 0;
        for (layer, g) in params.layers_mut().iter_mut().zip(&grads.layers) {
            for (p, &gv) in layer.weight.iter_mut().chain(layer.bias.iter_mut()).zip(g.weight.iter().chain(&g.bias)) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                *p -= step * *m / (v.sqrt() + eps);
                k += 1;
            }
        }
        debug_assert_eq!(k, self.m.len());
    }
}
