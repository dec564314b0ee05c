//! Networks of the sequential latent-variable model.
//!
//! * history encoder: gated recurrent cell over `(x_t, u_t, z_{t-1})`
//! * recognition head `q(z_t | z_{1:t-1}, x_{1:t})`
//! * generative recurrence over `(z_{t-1}, x_{t-1}, u_t)` feeding the
//!   transition prior `p(z_t | z_{1:t-1})` and emission `p(x_t | x_{1:t-1}, z_{1:t})`
//! * discriminator over latent sequences
//! * RUL readout

mod gaussian;
mod networks;
mod params;

pub use gaussian::{GaussianDiag, GaussianVar};
pub use networks::{BoundModel, HistoryState, DISC_LOGIT_BOUND};
pub use params::{Group, GruIds, Layout, LinearIds, ModelParams, NetworkSpec, ParamEntry};

/// Log-variances are confined to `[-LOG_VAR_BOUND, LOG_VAR_BOUND]`.
pub const LOG_VAR_BOUND: f64 = 10.0;
