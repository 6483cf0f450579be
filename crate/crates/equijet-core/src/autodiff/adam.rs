//! Adam optimizer with standard bias correction.

use super::store::ParamStore;
use alloc::vec;
use alloc::vec::Vec;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment estimates congruent with the
/// parameter store, plus the step counter and running beta powers used for
/// bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn adam_step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.m.len(), store.len(), "optimizer/store size mismatch");
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.step += 1;
        self.beta1_pow *= beta1;
        self.beta2_pow *= beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        for i in 0..self.m.len() {
            let g = store.grads()[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            store.values_mut()[i] -= lr * m_hat / (crate::math::sqrt(v_hat) + eps);
        }
        store.zero_grads();
    }

    /// Raw state for persistence: `(m, v, step)`.
    pub fn to_parts(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Rebuilds state saved by [`AdamState::to_parts`]; the beta powers are
    /// recomputed from the step count.
    pub fn from_parts(cfg: AdamConfig, m: Vec<f64>, v: Vec<f64>, step: u64) -> Self {
        assert_eq!(m.len(), v.len(), "moment arrays must be congruent");
        let mut beta1_pow = 1.0;
        let mut beta2_pow = 1.0;
        for _ in 0..step {
            beta1_pow *= cfg.beta1;
            beta2_pow *= cfg.beta2;
        }
        AdamState { cfg, m, v, step, beta1_pow, beta2_pow }
    }
}

/// Rescales the accumulated gradients so their global norm is at most
/// `max_norm`, returning the norm before clipping. Occasional gradient
/// spikes from the product layers can otherwise throw a run off a good
/// trajectory it never fully recovers within the epoch budget.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = crate::math::sqrt(store.grads().iter().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in store.grads_mut() {
            *g *= scale;
        }
    }
    norm
}
