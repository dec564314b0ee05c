use crate::diff::{concat, ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::gaussian::{bound_log_var, GaussianVar};
use super::params::{Group, GruIds, LinearIds, ModelParams};

/// Discriminator logits are squashed into `(-15, 15)` so probabilities stay
/// strictly inside `(0, 1)`.
pub const DISC_LOGIT_BOUND: f64 = 15.0;

/// Recurrent summary of everything seen so far.
#[derive(Clone, Copy)]
pub struct HistoryState<'t> {
    pub h: Var<'t>,
    /// Number of observations folded into `h`.
    pub t: usize,
}

/// Model parameters placed on a tape.
///
/// Parameters in the `trainable` groups become gradient-carrying leaves;
/// the rest are recorded as constants, so a backward pass only ever
/// produces gradients for the partition being optimized.
pub struct BoundModel<'t, 'p> {
    tape: &'t Tape,
    params: &'p ModelParams,
    vars: Vec<Var<'t>>,
}

impl<'t, 'p> BoundModel<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ModelParams, trainable: &[Group]) -> Self {
        let vars = params
            .ids()
            .map(|id| {
                let v = params.get(id).clone();
                if trainable.contains(&params.group(id)) {
                    tape.param(id, v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self { tape, params, vars }
    }

    /// Binds `ids` to caller-supplied tape variables (for instance the
    /// leaves created by [`crate::diff::grad_check`]) and every other
    /// parameter as a constant.
    pub fn with_vars(tape: &'t Tape, params: &'p ModelParams, ids: &[ParamId], vars: &[Var<'t>]) -> Result<Self> {
        if ids.len() != vars.len() {
            return Err(Error::shape("with_vars", format!("{} ids for {} variables", ids.len(), vars.len())));
        }
        let mut bound: Vec<Var<'t>> = params.ids().map(|id| tape.constant(params.get(id).clone())).collect();
        for (&id, &v) in ids.iter().zip(vars) {
            if id.0 >= bound.len() || v.shape() != params.get(id).shape() {
                return Err(Error::shape("with_vars", format!("variable for {id:?} does not match the parameter")));
            }
            bound[id.0] = v;
        }
        Ok(Self { tape, params, vars: bound })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    fn linear(&self, l: LinearIds, x: Var<'t>) -> Result<Var<'t>> {
        self.var(l.w).matmul(x)?.add(self.var(l.b))
    }

    fn gru(&self, g: GruIds, h: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = self.params.spec().n_h;
        let gx = self.var(g.wx).matmul(x)?.add(self.var(g.b))?;
        let gh = self.var(g.uzr).matmul(h)?;
        let update = gx.slice(0, n)?.add(gh.slice(0, n)?)?.sigmoid()?;
        let reset = gx.slice(n, n)?.add(gh.slice(n, n)?)?.sigmoid()?;
        let cand = gx.slice(2 * n, n)?.add(self.var(g.uh).matmul(reset.mul(h)?)?)?.tanh()?;
        // h' = h + update * (cand - h)
        h.add(update.mul(cand.sub(h)?)?)
    }

    fn check_len(&self, what: &str, v: Var<'t>, n: usize) -> Result<()> {
        if v.len() != n {
            return Err(Error::shape("model", format!("{what} has {} entries, expected {n}", v.len())));
        }
        Ok(())
    }

    fn zeros(&self, n: usize) -> Var<'t> {
        self.tape.constant(Tensor::zeros(&[n]))
    }

    /// Learned initial encoder state.
    pub fn initial_history(&self) -> HistoryState<'t> {
        HistoryState { h: self.var(self.params.layout().enc_h0), t: 0 }
    }

    /// Folds `(x_t, u_t, z_{t-1})` into the encoder state.
    pub fn encode_history(
        &self,
        prev: &HistoryState<'t>,
        x: Var<'t>,
        u: Option<Var<'t>>,
        z_prev: Var<'t>,
    ) -> Result<HistoryState<'t>> {
        let s = self.params.spec();
        self.check_len("x", x, s.n_x)?;
        self.check_len("z_prev", z_prev, s.n_z)?;
        let input = self.join(x, u, Some(z_prev))?;
        let h = self.gru(self.params.layout().enc, prev.h, input)?;
        Ok(HistoryState { h, t: prev.t + 1 })
    }

    fn join(&self, a: Var<'t>, u: Option<Var<'t>>, c: Option<Var<'t>>) -> Result<Var<'t>> {
        let n_u = self.params.spec().n_u;
        let mut parts = vec![a];
        match (n_u, u) {
            (0, None) => {}
            (n, Some(u)) => {
                self.check_len("u", u, n)?;
                parts.push(u);
            }
            (n, None) => return Err(Error::shape("model", format!("missing {n} input settings"))),
        }
        parts.extend(c);
        concat(&parts)
    }

    /// Approximate posterior over `z_t` from the encoder state.
    pub fn recognize(&self, h: &HistoryState<'t>) -> Result<GaussianVar<'t>> {
        let l = self.params.layout();
        self.check_len("history", h.h, self.params.spec().n_h)?;
        let hidden = self.linear(l.rec_hidden, h.h)?.tanh()?;
        Ok(GaussianVar {
            mean: self.linear(l.rec_mean, hidden)?,
            log_var: bound_log_var(self.linear(l.rec_log_var, hidden)?)?,
        })
    }

    /// Learned initial state of the generative recurrence.
    pub fn initial_prior_history(&self) -> HistoryState<'t> {
        HistoryState { h: self.var(self.params.layout().gen_h0), t: 0 }
    }

    /// Advances the generative recurrence with `(z_{t-1}, x_{t-1}, u_t)`.
    /// It never sees `x_t`, so it can condition both the transition prior
    /// and the emission of step `t`.
    pub fn advance_prior_history(
        &self,
        prev: &HistoryState<'t>,
        z_prev: Var<'t>,
        x_prev: Var<'t>,
        u: Option<Var<'t>>,
    ) -> Result<HistoryState<'t>> {
        let s = self.params.spec();
        self.check_len("z_prev", z_prev, s.n_z)?;
        self.check_len("x_prev", x_prev, s.n_x)?;
        let input = self.join(concat(&[z_prev, x_prev])?, u, None)?;
        let h = self.gru(self.params.layout().gen, prev.h, input)?;
        Ok(HistoryState { h, t: prev.t + 1 })
    }

    /// `p(z_t | z_{1:t-1}, ...)`. `None` for the first latent, which has a
    /// fixed standard-normal prior. In Markovian mode the generative history
    /// is replaced by zeros so the prior depends on `z_{t-1}` alone.
    pub fn transition_prior(
        &self,
        z_prev: Option<Var<'t>>,
        h_prior: &HistoryState<'t>,
        markovian: bool,
    ) -> Result<GaussianVar<'t>> {
        let s = self.params.spec();
        let Some(z_prev) = z_prev else {
            return Ok(GaussianVar::standard(self.tape, s.n_z));
        };
        self.check_len("z_prev", z_prev, s.n_z)?;
        let l = self.params.layout();
        let hist = if markovian { self.zeros(s.n_h) } else { h_prior.h };
        let hidden = self.linear(l.prior_hidden, concat(&[z_prev, hist])?)?.tanh()?;
        let mean = self.var(l.prior_skip).matmul(z_prev)?.add(self.linear(l.prior_mean, hidden)?)?;
        Ok(GaussianVar { mean, log_var: bound_log_var(self.linear(l.prior_log_var, hidden)?)? })
    }

    /// `p(x_t | x_{1:t-1}, z_{1:t})`; Markovian mode drops the history.
    pub fn emit(&self, h_prior: &HistoryState<'t>, z: Var<'t>, markovian: bool) -> Result<GaussianVar<'t>> {
        let s = self.params.spec();
        self.check_len("z", z, s.n_z)?;
        let l = self.params.layout();
        let hist = if markovian { self.zeros(s.n_h) } else { h_prior.h };
        let hidden = self.linear(l.emit_hidden, concat(&[z, hist])?)?.tanh()?;
        let mean = self.var(l.emit_skip).matmul(z)?.add(self.linear(l.emit_mean, hidden)?)?;
        Ok(GaussianVar { mean, log_var: bound_log_var(self.linear(l.emit_log_var, hidden)?)? })
    }

    /// Bounded discriminator logit for a latent sequence. Per-step features
    /// are mean-pooled over time.
    pub fn discriminator_logit(&self, zs: &[Var<'t>]) -> Result<Var<'t>> {
        if zs.is_empty() {
            return Err(Error::InvalidArgument("discriminator needs a nonempty sequence".into()));
        }
        let l = self.params.layout();
        let n_z = self.params.spec().n_z;
        let mut pooled: Option<Var<'t>> = None;
        for &z in zs {
            self.check_len("z", z, n_z)?;
            let f = self.linear(l.disc_hidden, z)?.tanh()?;
            pooled = Some(match pooled {
                Some(p) => p.add(f)?,
                None => f,
            });
        }
        let pooled = pooled.expect("nonempty").scale(1.0 / zs.len() as f64)?;
        let raw = self.linear(l.disc_out, pooled)?;
        raw.scale(1.0 / DISC_LOGIT_BOUND)?.tanh()?.scale(DISC_LOGIT_BOUND)
    }

    /// Probability that `zs` came from the prior.
    pub fn discriminate(&self, zs: &[Var<'t>]) -> Result<Var<'t>> {
        self.discriminator_logit(zs)?.sigmoid()
    }

    /// Nonnegative RUL estimate in cycles from `(h_t, E[z_t])`.
    pub fn rul_head(&self, h: &HistoryState<'t>, z_mean: Var<'t>) -> Result<Var<'t>> {
        let s = self.params.spec();
        self.check_len("history", h.h, s.n_h)?;
        self.check_len("z_mean", z_mean, s.n_z)?;
        let l = self.params.layout();
        let hidden = self.linear(l.rul_hidden, concat(&[h.h, z_mean])?)?.tanh()?;
        self.linear(l.rul_out, hidden)?.softplus()
    }
}
