use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter, with its own step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam update of one tensor.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() {
        return Err(Error::shape(format!(
            "parameter {:?}, gradient {:?}, state {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g as f64;
        let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
        let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let update = cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
        *p = (*p as f64 - update) as f32;
    }
    Ok(())
}

/// Adam over the trainable parameters of a graph. State exists only for
/// parameters that have been updated while trainable.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.state.get(name)
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Updates every trainable parameter that has a gradient. Gradients for
    /// frozen parameters are ignored.
    pub fn step(&mut self, g: &mut ModelGraph, grads: &Gradients) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}' is not finite")));
        }
        let trainable: Vec<bool> = g.param_names().iter().map(|n| g.is_trainable(n)).collect();
        for ((name, p), trainable) in g.params_mut().into_iter().zip(trainable) {
            if !trainable {
                continue;
            }
            let Some(grad) = grads.get(&name) else { continue };
            let st = self.state.entry(name).or_insert_with(|| AdamState::zeros(p.len()));
            adam_step(p, grad, st, &self.cfg)?;
        }
        Ok(())
    }

    /// Drops the state of the named parameters; they restart from zero moments.
    pub fn reset(&mut self, names: &[String]) {
        for n in names {
            self.state.remove(n);
        }
    }
}
