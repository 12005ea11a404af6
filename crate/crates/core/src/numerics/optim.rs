use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam accumulators for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                let m = Moments {
                    first: vec![0.0; t.numel()],
                    second: vec![0.0; t.numel()],
                };
                (name.clone(), m)
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient; frozen parameters are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let moments = state.moments.get_mut(&name).ok_or_else(|| Error::Missing {
            what: "optimizer moments",
            name: name.clone(),
        })?;
        if params.is_frozen(&name) {
            continue;
        }
        let p = params.get_mut(&name)?;
        let grad = grads.get(&name);
        if let Some(g) = grad {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        for i in 0..p.numel() {
            let g = grad.map_or(0.0, |g| g.data()[i]);
            let m = &mut moments.first[i];
            let v = &mut moments.second[i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
