//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Apply one update from gradients keyed by parameter name. Names
    /// missing from `grads` are left untouched.
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9 }
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: BTreeMap::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        let SgdConfig { lr, momentum } = self.config;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(opt: &mut dyn Optimizer, steps: usize) -> f64 {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[2], 3.0));
        for _ in 0..steps {
            let x = store.get("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.map(|v| 2.0 * v));
            opt.step(&mut store, &grads);
        }
        store.get("x").unwrap().max_abs()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr · g/|g|.
        let mut adam = Adam::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 0.0 });
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[1], 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::full(&[1], 5.0));
        adam.step(&mut store, &grads);
        assert!((store.get("x").unwrap().data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        assert!(quadratic_descent(&mut Adam::new(AdamConfig { lr: 0.05, ..Default::default() }), 400) < 0.1);
        assert!(quadratic_descent(&mut Sgd::new(SgdConfig::default()), 400) < 1e-3);
    }
}
