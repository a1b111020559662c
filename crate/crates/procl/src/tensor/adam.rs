//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Flattens the accumulators into named tensors for checkpointing.
    pub fn to_named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.m {
            out.insert(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("adam.v.{name}"), t.clone());
        }
        out.insert("adam.step".to_string(), Tensor::scalar(self.step as f64));
        out
    }

    /// Rebuilds accumulators from tensors named by [`AdamState::to_named_tensors`].
    pub fn from_named_tensors(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut state = AdamState::new();
        for (name, t) in map {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                state.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                state.v.insert(rest.to_string(), t.clone());
            } else if name == "adam.step" {
                state.step = t.item()? as u64;
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over every parameter in the store.
/// Missing gradients are treated as zero; the step counter advances by one.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if hp.lr <= 0.0 {
        return Err(Error::InvalidArgument("adam: lr must be > 0".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, value) in params.iter_mut() {
        let zero;
        let grad = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(value.shape());
                &zero
            }
        };
        if grad.shape() != value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient shape {:?} != parameter {name} shape {:?}",
                    grad.shape(),
                    value.shape()
                ),
            ));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        for i in 0..value.numel() {
            let g = grad.data()[i];
            let mi = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * g;
            let vi = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            value.data_mut()[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
