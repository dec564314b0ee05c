//! Alternating minimax optimization.
//!
//! Every step draws one batch of whole trajectories and runs, in order,
//! `disc_steps_per_gen_step` discriminator updates of ψ, one generative
//! update of θ and φ on the combined objective, and, when RUL supervision
//! is enabled, an update of ρ on the squared RUL error. All randomness is
//! derived from `(seed, step)`, so a run resumed from a checkpoint retraces
//! the uninterrupted run exactly.

mod adam;
mod checkpoint;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, OptimizerState, ParamStore};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use trainer::{
    maximize_elbo, train, EvalRecord, Provisional, StepRecord, TrainOutcome, TrainState, TrainTrace, Trainer, TrainingData, TrainUnit,
    MAX_CONSECUTIVE_NONFINITE, VALIDATION_CUTS,
};

/// 64-bit FNV-1a.
#[derive(Clone, Debug)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub trajectories_per_batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_adv: f64,
    pub disc_steps_per_gen_step: usize,
    pub gradient_clip_norm: f64,
    pub markovian: bool,
    pub rul_supervision: bool,
    pub eval_every: usize,
    /// Learning rate of the RUL head.
    pub rul_lr: f64,
    /// Fold the RUL loss into the generative step, so it also shapes the
    /// encoder, instead of running a separate head-only step.
    pub joint_rul: bool,
    /// Weight of the RUL loss relative to the per-step combined objective
    /// in joint mode.
    pub rul_weight: f64,
    pub rul_cap: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            trajectories_per_batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_adv: 0.1,
            disc_steps_per_gen_step: 1,
            gradient_clip_norm: 5.0,
            markovian: false,
            rul_supervision: true,
            eval_every: 200,
            rul_lr: 5e-2,
            joint_rul: true,
            rul_weight: 1.0,
            rul_cap: crate::data::DEFAULT_RUL_CAP,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("trajectories_per_batch", self.trajectories_per_batch as f64),
            ("lr", self.lr),
            ("eps", self.eps),
            ("disc_steps_per_gen_step", self.disc_steps_per_gen_step as f64),
            ("gradient_clip_norm", self.gradient_clip_norm),
            ("eval_every", self.eval_every as f64),
            ("rul_lr", self.rul_lr),
            ("rul_cap", self.rul_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        if !(self.rul_weight >= 0.0 && self.rul_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("rul_weight must be >= 0, got {}", self.rul_weight)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn rul_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.rul_lr, ..self.adam() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        let digest = |s: &str| {
            let mut h = Fnv64::new();
            h.write(s.as_bytes());
            h.finish()
        };
        assert_eq!(digest(""), 0xcbf29ce484222325);
        assert_eq!(digest("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(digest("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { disc_steps_per_gen_step: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { beta2: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let json = r#"{"seed": 3, "epochs": 2, "learning_rate": 0.1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let json = r#"{"seed": 3, "epochs": 2}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.seed, c.epochs, c.trajectories_per_batch), (3, 2, 8));
    }
}
