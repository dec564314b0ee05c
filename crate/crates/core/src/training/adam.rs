use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Anything the optimizer can update in place.
pub trait ParamStore {
    fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor;
}

impl ParamStore for ModelParams {
    fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.value_mut(id)
    }
}

impl ParamStore for Vec<Tensor> {
    fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment estimates for a fixed set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// Number of attempted steps, including skipped ones.
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
    pub m: BTreeMap<ParamId, Vec<f64>>,
    pub v: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    /// State for the parameters `ids`, whose sizes are read from `sizes`.
    pub fn new(config: AdamConfig, ids: impl IntoIterator<Item = (ParamId, usize)>) -> Self {
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for (id, n) in ids {
            m.insert(id, vec![0.0; n]);
            v.insert(id, vec![0.0; n]);
        }
        Self { config, t: 0, skipped: 0, m, v }
    }

    pub fn for_groups(config: AdamConfig, params: &ModelParams, groups: &[crate::model::Group]) -> Self {
        Self::new(config, params.ids().filter(|&id| groups.contains(&params.group(id))).map(|id| (id, params.get(id).len())))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.m.keys().copied()
    }

    pub fn covers(&self, id: ParamId) -> bool {
        self.m.contains_key(&id)
    }
}

/// One bias-corrected Adam update of exactly the parameters owned by
/// `state`. Returns `Ok(false)` and leaves the parameters untouched when a
/// gradient is non-finite; the step counter still advances.
pub fn adam_step<P: ParamStore>(params: &mut P, grads: &Gradients, state: &mut OptimizerState) -> Result<bool> {
    let owned: Vec<ParamId> = state.param_ids().collect();
    let given: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
    if owned != given {
        return Err(Error::InvalidArgument(format!(
            "gradients cover {} tensors, optimizer owns {}",
            given.len(),
            owned.len()
        )));
    }
    for (id, g) in grads.iter() {
        if g.len() != state.m[&id].len() {
            return Err(Error::shape("adam_step", format!("gradient for {id:?} has {} entries, expected {}", g.len(), state.m[&id].len())));
        }
    }
    state.t += 1;
    if !grads.is_finite() {
        state.skipped += 1;
        return Ok(false);
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (id, g) in grads.iter() {
        let m = state.m.get_mut(&id).expect("checked");
        let v = state.v.get_mut(&id).expect("checked");
        let p = params.tensor_mut(id);
        if p.len() != g.len() {
            return Err(Error::shape("adam_step", format!("parameter {id:?} has {} entries, gradient {}", p.len(), g.len())));
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> (Vec<Tensor>, OptimizerState) {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        (vec![Tensor::scalar(x).unwrap()], OptimizerState::new(cfg, [(ParamId(0), 1)]))
    }

    fn grad(g: f64) -> Gradients {
        let mut gr = Gradients::default();
        gr.insert(ParamId(0), Tensor::scalar(g).unwrap());
        gr
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let (mut p, mut s) = single(1.25);
        assert!(adam_step(&mut p, &grad(0.0), &mut s).unwrap());
        assert_eq!(p[0].item(), 1.25);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, -7.0, 250.0] {
            let (mut p, mut s) = single(0.0);
            adam_step(&mut p, &grad(g), &mut s).unwrap();
            assert!((p[0].item() + 0.05 * g.signum()).abs() < 1e-6, "{g}: {}", p[0].item());
        }
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let (mut p, mut s) = single(0.0);
        for _ in 0..2000 {
            let x = p[0].item();
            adam_step(&mut p, &grad(2.0 * (x - 3.0)), &mut s).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let (mut p, mut s) = single(0.0);
        let mut g = grad(1.0);
        g.insert(ParamId(1), Tensor::scalar(1.0).unwrap());
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.t, 0);
    }
}
