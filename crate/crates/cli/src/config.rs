use std::path::Path;

use avfp_core::training::TrainConfig;
use avfp_core::NetworkSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Flat run configuration: every training option plus the network sizes.
/// `n_x` and `n_u` normally come from the data; when given they must match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
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
    pub rul_lr: f64,
    pub joint_rul: bool,
    pub rul_weight: f64,
    pub rul_cap: f64,
    pub validation_fraction: f64,

    pub n_x: Option<usize>,
    pub n_u: Option<usize>,
    pub n_z: usize,
    pub n_h: usize,
    pub hidden_recognition: usize,
    pub hidden_prior: usize,
    pub hidden_emission: usize,
    pub hidden_discriminator: usize,
    pub hidden_rul: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &NetworkSpec::with_dims(1, 0))
    }
}

impl RunConfig {
    pub fn from_parts(t: &TrainConfig, s: &NetworkSpec) -> Self {
        Self {
            seed: t.seed,
            epochs: t.epochs,
            trajectories_per_batch: t.trajectories_per_batch,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            lambda_adv: t.lambda_adv,
            disc_steps_per_gen_step: t.disc_steps_per_gen_step,
            gradient_clip_norm: t.gradient_clip_norm,
            markovian: t.markovian,
            rul_supervision: t.rul_supervision,
            eval_every: t.eval_every,
            rul_lr: t.rul_lr,
            joint_rul: t.joint_rul,
            rul_weight: t.rul_weight,
            rul_cap: t.rul_cap,
            validation_fraction: t.validation_fraction,
            n_x: None,
            n_u: None,
            n_z: s.n_z,
            n_h: s.n_h,
            hidden_recognition: s.hidden_recognition,
            hidden_prior: s.hidden_prior,
            hidden_emission: s.hidden_emission,
            hidden_discriminator: s.hidden_discriminator,
            hidden_rul: s.hidden_rul,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            trajectories_per_batch: self.trajectories_per_batch,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lambda_adv: self.lambda_adv,
            disc_steps_per_gen_step: self.disc_steps_per_gen_step,
            gradient_clip_norm: self.gradient_clip_norm,
            markovian: self.markovian,
            rul_supervision: self.rul_supervision,
            eval_every: self.eval_every,
            rul_lr: self.rul_lr,
            joint_rul: self.joint_rul,
            rul_weight: self.rul_weight,
            rul_cap: self.rul_cap,
            validation_fraction: self.validation_fraction,
        }
    }

    /// Network sizes for data with `n_x` sensors and `n_u` settings.
    pub fn network_spec(&self, n_x: usize, n_u: usize) -> Result<NetworkSpec, CliError> {
        for (name, want, got) in [("n_x", self.n_x, n_x), ("n_u", self.n_u, n_u)] {
            if let Some(w) = want {
                if w != got {
                    return Err(CliError::Data(format!("spec mismatch: config sets {name} = {w}, data has {got}")));
                }
            }
        }
        Ok(NetworkSpec {
            n_x,
            n_u,
            n_z: self.n_z,
            n_h: self.n_h,
            hidden_recognition: self.hidden_recognition,
            hidden_prior: self.hidden_prior,
            hidden_emission: self.hidden_emission,
            hidden_discriminator: self.hidden_discriminator,
            hidden_rul: self.hidden_rul,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
