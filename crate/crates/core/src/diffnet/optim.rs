use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::tape::ValueGrid;
use super::NetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ValueGrid>,
    pub v: Vec<ValueGrid>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self { step: 0, m: params.zero_grads(), v: params.zero_grads() }
    }
}

fn check(name: &str, expected: [usize; 2], found: [usize; 2]) -> Result<(), NetError> {
    if expected == found {
        Ok(())
    } else {
        Err(NetError::ShapeMismatch { name: name.to_string(), expected, found })
    }
}

/// One bias-corrected Adam update. All shapes are checked before any
/// parameter is touched.
pub fn optimizer_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, config: &AdamConfig) -> Result<(), NetError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NetError::DimensionMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let name = &params.names()[i];
        let shape = params.grids()[i].shape();
        check(name, shape, g.shape())?;
        check(name, shape, state.m[i].shape())?;
        check(name, shape, state.v[i].shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.get_mut(id).data_mut();
        for k in 0..w.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= config.lr * mh / (vh.sqrt() + config.eps);
        }
    }
    Ok(())
}
