//! Adversarial-variational filtering for remaining-useful-life prognostics.
//!
//! A non-Markovian state-space model is fitted to multi-sensor run-to-failure
//! data by maximizing a sequential evidence lower bound while a discriminator
//! pushes recognition samples towards the latent prior. The crate contains the
//! differentiation substrate, the networks, the objectives, the minimax
//! trainer, C-MAPSS ingestion with a Kalman-filter oracle, and the evaluation
//! harness.

pub mod checks;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod training;

pub use diff::{Gradients, ParamId, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{GaussianDiag, Group, ModelParams, NetworkSpec};
pub use rng::Rng;
