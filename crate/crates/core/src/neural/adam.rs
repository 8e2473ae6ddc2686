use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MASKNET_LR: f64 = 2e-4;
pub const DISPNET_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidArgument(format!("Adam betas {} and {} must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam learning rate and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, first: ParamStore::new(), second: ParamStore::new() })
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        if !state.first.contains(name) {
            state.first.insert(name.clone(), Tensor::zeros(p.shape()));
            state.second.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        let m = state.first.get_mut(name).expect("inserted").data_mut();
        let v = state.second.get_mut(name).expect("inserted").data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
