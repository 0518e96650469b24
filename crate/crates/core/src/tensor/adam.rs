use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Param, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
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

/// Moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_param(param: &Param<T>, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` from its accumulated gradient.
pub fn adam_step<T: Scalar>(param: &mut Param<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.shape() != param.value.shape() || state.v.shape() != param.value.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "state {:?} for param {:?}",
                state.m.shape(),
                param.value.shape()
            ),
        ));
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(state.step as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(state.step as i32));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let values = param.value.data_mut();
    let grads = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        values[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a named parameter set; states are created lazily per trainable param.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut Params<T>) -> Result<()> {
        for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::for_param(p, self.config));
            state.config.lr = self.config.lr;
            adam_step(p, state)?;
        }
        self.steps += 1;
        Ok(())
    }
}
