use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learncore::params::ParamGroup;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<f32>>,
    pub second: BTreeMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(group: &ParamGroup) -> Self {
        Self::with_config(group, AdamConfig::default())
    }

    pub fn with_config(group: &ParamGroup, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Tensor<f32>> = group
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Bias-corrected Adam update of every tensor in `group`. `grads` must name
/// exactly the group's tensors.
pub fn adam_step(
    group: &mut ParamGroup,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !group.trainable() {
        return Err(Error::invalid(format!(
            "group {} is frozen and cannot be updated",
            group.kind()
        )));
    }
    if grads.len() != group.len() || state.first.len() != group.len() {
        return Err(Error::invalid(format!(
            "group {} has {} tensors but got {} gradients / {} moments",
            group.kind(),
            group.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (name, p) in group.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
        g.ensure_shape(p.shape(), name)?;
        state.first.get(name).map_or(
            Err(Error::invalid(format!("missing moment for `{name}`"))),
            |m| m.ensure_shape(p.shape(), name),
        )?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("grad.{name}")));
        }
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in group.iter_mut() {
        let g = grads[name].data();
        let m = state.first.get_mut(name).unwrap().data_mut();
        let v = state.second.get_mut(name).unwrap().data_mut();
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            let pv = &mut p.data_mut()[i];
            *pv = (*pv as f64 - upd) as f32;
        }
    }
    Ok(())
}

/// Step decay: `rate(step) = initial · 0.5^⌊step / period⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub period: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, period: u64) -> Result<Self> {
        let s = Self { initial, period };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial > 0.0) || self.period == 0 {
            return Err(Error::invalid(format!(
                "learning rate {} and halving period {} must be positive",
                self.initial, self.period
            )));
        }
        Ok(())
    }

    pub fn rate(&self, step: u64) -> f64 {
        let halvings = (step / self.period).min(1000) as i32;
        self.initial * 0.5f64.powi(halvings)
    }
}
