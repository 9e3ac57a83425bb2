use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `value` in place. `t` is the 1-based
/// update count; an empty `grad` stands for zeros.
pub fn adam_step(value: &mut [f64], grad: &[f64], state: &mut Moments, t: u64, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = value.len();
    if (!grad.is_empty() && grad.len() != n) || state.m.len() != n || state.v.len() != n {
        return Err(Error::dim(format!(
            "adam update of {n} values with {} gradients and moments of {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adam update count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        let g = grad.get(i).copied().unwrap_or(0.0);
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every tensor of a parameter store, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            t: 0,
            moments: store.iter().map(|(_, p)| Moments::zeros(p.value.len())).collect(),
        }
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.moments.len(),
                store.len()
            )));
        }
        self.t += 1;
        for (p, st) in store.params_mut().iter_mut().zip(&mut self.moments) {
            adam_step(p.value.data_mut(), &p.grad, st, self.t, lr, &self.config)?;
        }
        Ok(())
    }
}
