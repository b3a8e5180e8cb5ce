use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Decoupled: applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-5,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Adam with decoupled weight decay over a registered subset of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamState {
    /// Registers every parameter whose path starts with one of `prefixes`.
    pub fn new(params: &ParameterSet, prefixes: &[&str], config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, t)| {
                (
                    k.clone(),
                    Moments {
                        first: Tensor::zeros(t.shape()),
                        second: Tensor::zeros(t.shape()),
                    },
                )
            })
            .collect();
        AdamState {
            config,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn registered(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Zero gradients shaped like every registered parameter.
    pub fn zero_grads(&self, params: &ParameterSet) -> Result<Gradients> {
        Gradients::zeros_for(params, self.moments.keys())
    }

    /// One bias-corrected Adam update. Every registered parameter must have a
    /// gradient; gradients for unregistered parameters are ignored.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        for name in self.moments.keys() {
            let g = grads
                .param(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
            let p = params.get(name)?;
            if !g.same_shape(p) {
                return Err(Error::dim(format!(
                    "gradient {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, m) in self.moments.iter_mut() {
            let g = grads.param(name).expect("checked above");
            let p = params.get_mut(name)?;
            let pv = p.data_mut();
            let first = m.first.data_mut();
            let second = m.second.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                first[i] = beta1 * first[i] + (1.0 - beta1) * gi;
                second[i] = beta2 * second[i] + (1.0 - beta2) * gi * gi;
                let m_hat = first[i] / bc1;
                let v_hat = second[i] / bc2;
                pv[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + wd * pv[i]);
            }
            if pv.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { primitive: "adam_step" });
            }
        }
        Ok(())
    }
}
