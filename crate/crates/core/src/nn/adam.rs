use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore, Parameter};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn for_shape(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` from its current gradient.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let grad = param.grad.data();
    let m = state.m.data_mut();
    for (mi, &g) in m.iter_mut().zip(grad) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
    }
    let v = state.v.data_mut();
    for (vi, &g) in v.iter_mut().zip(grad) {
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
    }
    let (m, v) = (state.m.data(), state.v.data());
    for ((theta, &mi), &vi) in param.value.data_mut().iter_mut().zip(m).zip(v) {
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over a whole [`ParamStore`], optionally restricted to a subset.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| AdamState::for_shape(p.value.shape()))
            .collect();
        Self {
            config,
            states,
            trainable: vec![true; store.len()],
        }
    }

    /// Only `ids` are updated by subsequent steps.
    pub fn restrict_to(mut self, ids: &[ParamId]) -> Self {
        self.trainable = vec![false; self.states.len()];
        for id in ids {
            self.trainable[id.index()] = true;
        }
        self
    }

    pub fn state(&self, id: ParamId) -> &AdamState {
        &self.states[id.index()]
    }

    /// Applies one update to every trainable parameter, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            if self.trainable[id.index()] {
                adam_step(store.get_mut(id), &mut self.states[id.index()], &self.config);
            }
        }
        store.zero_grad();
    }
}
