use crate::diff::{Tensor, Var};
use crate::error::{Error, Result};

use super::LOG_VAR_BOUND;

/// Diagonal Gaussian as plain values. `log_var` is clamped to
/// `[-10, 10]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(Error::shape("gaussian", format!("mean {} vs log_var {}", mean.len(), log_var.len())));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian"));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND)).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(n: usize) -> Self {
        Self { mean: vec![0.0; n], log_var: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// `mean + exp(log_var / 2) * noise`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::shape("sample_reparam", format!("noise {} vs dim {}", noise.len(), self.dim())));
        }
        Ok(self.mean.iter().zip(self.std()).zip(noise).map(|((m, s), e)| m + s * e).collect())
    }
}

/// Diagonal Gaussian whose parameters live on a tape.
#[derive(Clone, Copy)]
pub struct GaussianVar<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> GaussianVar<'t> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normal as tape constants.
    pub fn standard(tape: &'t crate::diff::Tape, n: usize) -> Self {
        Self { mean: tape.constant(Tensor::zeros(&[n])), log_var: tape.constant(Tensor::zeros(&[n])) }
    }

    pub fn from_values(tape: &'t crate::diff::Tape, g: &GaussianDiag) -> Result<Self> {
        Ok(Self { mean: tape.vector(g.mean.clone())?, log_var: tape.vector(g.log_var.clone())? })
    }

    pub fn to_values(&self) -> GaussianDiag {
        GaussianDiag { mean: self.mean.value().data().to_vec(), log_var: self.log_var.value().data().to_vec() }
    }

    /// Reparameterized draw, differentiable in `mean` and `log_var`.
    pub fn sample(&self, noise: &[f64]) -> Result<Var<'t>> {
        if noise.len() != self.dim() {
            return Err(Error::shape("sample_reparam", format!("noise {} vs dim {}", noise.len(), self.dim())));
        }
        let tape = self.mean.tape();
        let eps = tape.vector(noise.to_vec())?;
        let std = self.log_var.scale(0.5)?.exp()?;
        self.mean.add(std.mul(eps)?)
    }
}

/// Smoothly maps an unbounded pre-activation into `(-10, 10)`; zero maps to
/// zero and the slope at zero is one.
pub(crate) fn bound_log_var<'t>(raw: Var<'t>) -> Result<Var<'t>> {
    raw.scale(1.0 / LOG_VAR_BOUND)?.tanh()?.scale(LOG_VAR_BOUND)
}
