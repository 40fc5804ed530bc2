//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use ndarray::Array2;

use super::nn::ParamStore;

/// Adam with bias correction. State is keyed by parameter name so it survives
/// checkpointing and is insensitive to iteration order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update using `grads`; parameters without a gradient entry are
    /// left untouched (that is how freezing works: simply don't pass grads).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = store.get(name) else {
                panic!("adam: gradient for unknown parameter {name}");
            };
            let dim = p.dim();
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(dim));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(dim));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut update = p.clone();
            for ((u, &mi), &vi) in update.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *u -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(name, update);
        }
    }
}
