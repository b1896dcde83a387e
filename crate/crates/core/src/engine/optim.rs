use serde::{Deserialize, Serialize};

use super::config::{AdamConfig, SgdConfig};

/// `v ← μ·v + g`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
}

/// First and second moments of one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam with bias correction; `t` is the 1-based step count.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Adam state for all θ rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            moments: sizes.iter().map(|&n| AdamMoments::zeros(n)).collect(),
        }
    }
}
