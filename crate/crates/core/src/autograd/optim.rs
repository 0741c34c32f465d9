use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{quantize, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are stored at 32-bit precision, like the parameters, so a
/// checkpointed optimizer resumes exactly.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.value(id).dim())).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. `grads` lists gradients by parameter; frozen or
    /// missing parameters are left untouched. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) -> f64 {
        self.step += 1;
        let c = self.config;
        let norm = grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = quantize(c.beta1 * *m + (1.0 - c.beta1) * g);
                *v = quantize(c.beta2 * *v + (1.0 - c.beta2) * g * g);
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = quantize(*p - c.lr * (mhat / (vhat.sqrt() + c.eps)) - c.lr * c.weight_decay * *p);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_shape_fn((3, 2), |(i, j)| 0.1 * i as f64 - 0.3 * j as f64));
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[(id, Array2::from_elem((3, 2), 5.0))]);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 3.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..200 {
            let w = store.value(id)[[0, 0]];
            opt.step(&mut store, &[(id, Array2::from_elem((1, 1), 2.0 * w))]);
        }
        assert!(store.value(id)[[0, 0]].abs() < 0.1);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 1.0));
        store.set_frozen(id, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[(id, Array2::from_elem((1, 1), 1.0))]);
        assert_eq!(store.value(id)[[0, 0]], 1.0);
    }
}
