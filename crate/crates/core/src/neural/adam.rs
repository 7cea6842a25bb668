use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::network::NetworkState;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(state: &NetworkState, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = state.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update(state: &mut NetworkState, grads: &[Tensor], opt: &mut AdamState) -> Result<()> {
    if grads.len() != state.entries.len() || opt.m.len() != grads.len() {
        return Err(Error::LengthMismatch {
            left: grads.len(),
            right: state.entries.len(),
        });
    }
    for ((_, p), g) in state.entries.iter().zip(grads) {
        g.expect_shape(p.shape())?;
        g.check_finite("gradient")?;
    }
    opt.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    for (((_, p), g), (m, v)) in state.entries.iter_mut().zip(grads).zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}
