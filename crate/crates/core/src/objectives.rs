//! Scalar training objectives.
//!
//! Sign conventions: `recon_loglik` and the ELBO are log-likelihoods (higher
//! is better); `adv_gen` and `adv_disc` are losses in nats (lower is better
//! for their respective player). The combined objective that the generative
//! phase maximizes is `recon_loglik - kl_total - lambda_adv * adv_gen`.

use crate::data::Sequence;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, GaussianDiag, GaussianVar, HistoryState, ModelParams};
use crate::rng::Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-term values of one objective evaluation, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveBreakdown {
    pub recon_loglik: f64,
    pub kl_total: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub combined: f64,
    pub kl_per_step: Vec<f64>,
}

impl ObjectiveBreakdown {
    pub fn elbo(&self) -> f64 {
        self.recon_loglik - self.kl_total
    }
}

/// `log N(x; mean, diag(exp(log_var)))` on the tape.
pub fn gaussian_log_density_var<'t>(x: Var<'t>, g: &GaussianVar<'t>) -> Result<Var<'t>> {
    if x.len() != g.dim() {
        return Err(Error::shape("gaussian_log_density", format!("x {} vs dim {}", x.len(), g.dim())));
    }
    let n = g.dim() as f64;
    let sq = x.sub(g.mean)?.square()?;
    let maha = sq.mul(g.log_var.neg()?.exp()?)?;
    maha.add(g.log_var)?.sum()?.scale(-0.5)?.add_const(-HALF_LN_2PI * n)
}

pub fn gaussian_log_density(x: &[f64], g: &GaussianDiag) -> Result<f64> {
    let tape = Tape::new();
    let gv = GaussianVar::from_values(&tape, g)?;
    let x = tape.constant(Tensor::vector(x.to_vec())?);
    Ok(gaussian_log_density_var(x, &gv)?.item())
}

/// Closed-form `KL(q || p)` for diagonal Gaussians, on the tape.
pub fn kl_diag_var<'t>(q: &GaussianVar<'t>, p: &GaussianVar<'t>) -> Result<Var<'t>> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_diag_gaussians", format!("{} vs {}", q.dim(), p.dim())));
    }
    let n = q.dim() as f64;
    let ratio = q.log_var.sub(p.log_var)?.exp()?;
    let diff = q.mean.sub(p.mean)?.square()?.mul(p.log_var.neg()?.exp()?)?;
    let terms = ratio.add(diff)?.sub(q.log_var)?.add(p.log_var)?;
    terms.sum()?.add_const(-n)?.scale(0.5)
}

pub fn kl_diag_gaussians(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    let tape = Tape::new();
    let qv = GaussianVar::from_values(&tape, q)?;
    let pv = GaussianVar::from_values(&tape, p)?;
    // Cancellation can leave -1e-17 for identical arguments.
    Ok(kl_diag_var(&qv, &pv)?.item().max(0.0))
}

/// Discriminator and non-saturating generator losses from probabilities:
/// `disc = -mean(log d_real) - mean(log(1 - d_fake))`,
/// `gen = -mean(log d_fake)`.
pub fn adversarial_losses_var<'t>(d_real: &[Var<'t>], d_fake: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidArgument("adversarial losses need nonempty batches".into()));
    }
    for d in d_real.iter().chain(d_fake) {
        let p = d.item();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidArgument(format!("probability {p} outside (0, 1)")));
        }
    }
    let mean_of = |vs: Vec<Var<'t>>| -> Result<Var<'t>> {
        let n = vs.len() as f64;
        let mut acc = vs[0];
        for v in &vs[1..] {
            acc = acc.add(*v)?;
        }
        acc.scale(1.0 / n)
    };
    let log_real = mean_of(d_real.iter().map(|d| d.ln()).collect::<Result<_>>()?)?;
    let log_not_fake = mean_of(d_fake.iter().map(|d| d.rsub_const(1.0)?.ln()).collect::<Result<_>>()?)?;
    let log_fake = mean_of(d_fake.iter().map(|d| d.ln()).collect::<Result<_>>()?)?;
    let disc = log_real.add(log_not_fake)?.neg()?;
    Ok((disc, log_fake.neg()?))
}

pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let real: Vec<Var<'_>> = d_real.iter().map(|&p| tape.scalar(p)).collect::<Result<_>>()?;
    let fake: Vec<Var<'_>> = d_fake.iter().map(|&p| tape.scalar(p)).collect::<Result<_>>()?;
    let (d, g) = adversarial_losses_var(&real, &fake)?;
    Ok((d.item(), g.item()))
}

/// Same losses computed from (bounded) logits:
/// `-log sigmoid(l) = softplus(-l)`, `-log(1 - sigmoid(l)) = softplus(l)`.
pub fn adversarial_losses_from_logits<'t>(real: &[Var<'t>], fake: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("adversarial losses need nonempty batches".into()));
    }
    let sum = |vs: &[Var<'t>], f: &dyn Fn(Var<'t>) -> Result<Var<'t>>| -> Result<Var<'t>> {
        let mut acc = f(vs[0])?;
        for v in &vs[1..] {
            acc = acc.add(f(*v)?)?;
        }
        acc.scale(1.0 / vs.len() as f64)
    };
    let real_term = sum(real, &|l| l.neg()?.softplus())?;
    let fake_term = sum(fake, &|l| l.softplus())?;
    let gen = sum(fake, &|l| l.neg()?.softplus())?;
    Ok((real_term.add(fake_term)?, gen))
}

/// Standard-normal draws for one pass over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceNoise {
    /// `T x n_z` draws for the recognition samples.
    pub posterior: Vec<Vec<f64>>,
    /// `T x n_z` draws for ancestral prior samples.
    pub prior: Vec<Vec<f64>>,
}

impl SequenceNoise {
    pub fn draw(rng: &mut Rng, steps: usize, n_z: usize) -> Self {
        let posterior = (0..steps).map(|_| rng.normals(n_z)).collect();
        let prior = (0..steps).map(|_| rng.normals(n_z)).collect();
        Self { posterior, prior }
    }

    pub fn zeros(steps: usize, n_z: usize) -> Self {
        Self { posterior: vec![vec![0.0; n_z]; steps], prior: vec![vec![0.0; n_z]; steps] }
    }
}

/// Everything produced by one filtering pass over a sequence.
pub struct SequencePass<'t> {
    pub elbo: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
    pub kl_per_step: Vec<f64>,
    /// Recognition samples `z_1..z_T`.
    pub samples: Vec<Var<'t>>,
    /// Encoder states `h_1..h_T`, each updated before `z_t` is recognized.
    pub histories: Vec<HistoryState<'t>>,
    pub posterior_means: Vec<Var<'t>>,
}

fn check_sequence(model: &BoundModel<'_, '_>, seq: &Sequence, noise: &[Vec<f64>]) -> Result<()> {
    let s = model.params().spec();
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if noise.len() != seq.len() || noise.iter().any(|n| n.len() != s.n_z) {
        return Err(Error::shape("sequence_elbo", format!("noise must be {} x {}", seq.len(), s.n_z)));
    }
    if seq.x_dim() != s.n_x || seq.u_dim() != s.n_u {
        return Err(Error::SpecMismatch(format!(
            "sequence has n_x={} n_u={}, network expects n_x={} n_u={}",
            seq.x_dim(),
            seq.u_dim(),
            s.n_x,
            s.n_u
        )));
    }
    Ok(())
}

fn input<'t>(tape: &'t Tape, u: &[f64]) -> Result<Option<Var<'t>>> {
    if u.is_empty() {
        Ok(None)
    } else {
        Ok(Some(tape.vector(u.to_vec())?))
    }
}

/// Filtering pass: at each step the encoder absorbs `x_t` first, then
/// `z_t` is drawn from the recognition head, scored against the transition
/// prior, and used to explain `x_t` through the emission.
pub fn elbo_pass<'t>(
    model: &BoundModel<'t, '_>,
    seq: &Sequence,
    noise: &[Vec<f64>],
    markovian: bool,
) -> Result<SequencePass<'t>> {
    check_sequence(model, seq, noise)?;
    let tape = model.tape();
    let s = model.params().spec();
    let zero_z = tape.constant(Tensor::zeros(&[s.n_z]));
    let zero_x = tape.constant(Tensor::zeros(&[s.n_x]));

    let mut h = model.initial_history();
    let mut g = model.initial_prior_history();
    let mut z_prev: Option<Var<'t>> = None;
    let mut x_prev = zero_x;
    let mut recon: Option<Var<'t>> = None;
    let mut kl: Option<Var<'t>> = None;
    let mut out = SequencePass {
        elbo: zero_z,
        recon: zero_z,
        kl: zero_z,
        kl_per_step: Vec::with_capacity(seq.len()),
        samples: Vec::with_capacity(seq.len()),
        histories: Vec::with_capacity(seq.len()),
        posterior_means: Vec::with_capacity(seq.len()),
    };
    for t in 0..seq.len() {
        let x = tape.vector(seq.x[t].clone())?;
        let u = input(tape, &seq.u[t])?;
        h = model.encode_history(&h, x, u, z_prev.unwrap_or(zero_z))?;
        let q = model.recognize(&h)?;
        let z = q.sample(&noise[t])?;
        if !markovian {
            g = model.advance_prior_history(&g, z_prev.unwrap_or(zero_z), x_prev, u)?;
        }
        let p = model.transition_prior(z_prev, &g, markovian)?;
        let e = model.emit(&g, z, markovian)?;
        let ll = gaussian_log_density_var(x, &e)?;
        let k = kl_diag_var(&q, &p)?;
        out.kl_per_step.push(k.item());
        recon = Some(match recon {
            Some(r) => r.add(ll)?,
            None => ll,
        });
        kl = Some(match kl {
            Some(a) => a.add(k)?,
            None => k,
        });
        out.samples.push(z);
        out.histories.push(h);
        out.posterior_means.push(q.mean);
        z_prev = Some(z);
        x_prev = x;
    }
    out.recon = recon.expect("nonempty");
    out.kl = kl.expect("nonempty");
    out.elbo = out.recon.sub(out.kl)?;
    Ok(out)
}

/// Ancestral draw `z_{1:T}` from the transition prior. In non-Markovian
/// mode the generative recurrence is driven by the observed `x_{t-1}` and
/// `u_t` together with the prior's own previous draw.
pub fn sample_prior_sequence<'t>(
    model: &BoundModel<'t, '_>,
    seq: &Sequence,
    noise: &[Vec<f64>],
    markovian: bool,
) -> Result<Vec<Var<'t>>> {
    check_sequence(model, seq, noise)?;
    let tape = model.tape();
    let s = model.params().spec();
    let zero_z = tape.constant(Tensor::zeros(&[s.n_z]));
    let mut g = model.initial_prior_history();
    let mut z_prev: Option<Var<'t>> = None;
    let mut x_prev = tape.constant(Tensor::zeros(&[s.n_x]));
    let mut zs = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let u = input(tape, &seq.u[t])?;
        if !markovian {
            g = model.advance_prior_history(&g, z_prev.unwrap_or(zero_z), x_prev, u)?;
        }
        let z = model.transition_prior(z_prev, &g, markovian)?.sample(&noise[t])?;
        zs.push(z);
        z_prev = Some(z);
        x_prev = tape.vector(seq.x[t].clone())?;
    }
    Ok(zs)
}

/// Deterministic filtering pass that feeds posterior means back into the
/// encoder instead of samples. Returns `(h_t, E[z_t])` for every step.
pub fn filter_means<'t>(model: &BoundModel<'t, '_>, seq: &Sequence) -> Result<Vec<(HistoryState<'t>, Var<'t>)>> {
    let n_z = model.params().spec().n_z;
    check_sequence(model, seq, &vec![vec![0.0; n_z]; seq.len()])?;
    let tape = model.tape();
    let mut h = model.initial_history();
    let mut z_prev = tape.constant(Tensor::zeros(&[n_z]));
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let x = tape.vector(seq.x[t].clone())?;
        let u = input(tape, &seq.u[t])?;
        h = model.encode_history(&h, x, u, z_prev)?;
        let mean = model.recognize(&h)?.mean;
        out.push((h, mean));
        z_prev = mean;
    }
    Ok(out)
}

/// Recognition samples `z_1..z_T` without scoring them; the encoder is fed
/// its own samples exactly as in [`elbo_pass`].
pub fn recognition_samples<'t>(model: &BoundModel<'t, '_>, seq: &Sequence, noise: &[Vec<f64>]) -> Result<Vec<Var<'t>>> {
    check_sequence(model, seq, noise)?;
    let tape = model.tape();
    let mut h = model.initial_history();
    let mut z_prev = tape.constant(Tensor::zeros(&[model.params().spec().n_z]));
    let mut zs = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let x = tape.vector(seq.x[t].clone())?;
        let u = input(tape, &seq.u[t])?;
        h = model.encode_history(&h, x, u, z_prev)?;
        z_prev = model.recognize(&h)?.sample(&noise[t])?;
        zs.push(z_prev);
    }
    Ok(zs)
}

/// Tape-level combined objective. Returns the breakdown and the node holding
/// `combined`, ready for differentiation.
pub fn combined_pass<'t>(
    model: &BoundModel<'t, '_>,
    seq: &Sequence,
    noise: &SequenceNoise,
    lambda_adv: f64,
    markovian: bool,
) -> Result<(ObjectiveBreakdown, Var<'t>, SequencePass<'t>)> {
    if !(lambda_adv >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_adv must be >= 0, got {lambda_adv}")));
    }
    let pass = elbo_pass(model, seq, &noise.posterior, markovian)?;
    if lambda_adv == 0.0 {
        let b = ObjectiveBreakdown {
            recon_loglik: pass.recon.item(),
            kl_total: pass.kl.item(),
            adv_gen: 0.0,
            adv_disc: 0.0,
            combined: pass.elbo.item(),
            kl_per_step: pass.kl_per_step.clone(),
        };
        let node = pass.elbo;
        return Ok((b, node, pass));
    }
    let fake_logit = model.discriminator_logit(&pass.samples)?;
    let prior = sample_prior_sequence(model, seq, &noise.prior, markovian)?;
    let prior_vals: Vec<Var<'t>> =
        prior.iter().map(|z| model.tape().constant(z.value().as_ref().clone())).collect();
    let real_logit = model.discriminator_logit(&prior_vals)?;
    let (disc, gen) = adversarial_losses_from_logits(&[real_logit], &[fake_logit])?;
    let combined = pass.elbo.sub(gen.scale(lambda_adv)?)?;
    let b = ObjectiveBreakdown {
        recon_loglik: pass.recon.item(),
        kl_total: pass.kl.item(),
        adv_gen: gen.item(),
        adv_disc: disc.item(),
        combined: combined.item(),
        kl_per_step: pass.kl_per_step.clone(),
    };
    Ok((b, combined, pass))
}

/// Single-sample reparameterized ELBO of one sequence.
pub fn sequence_elbo(params: &ModelParams, seq: &Sequence, noise: &[Vec<f64>], markovian: bool) -> Result<ObjectiveBreakdown> {
    let tape = Tape::new();
    let model = BoundModel::new(&tape, params, &[]);
    let pass = elbo_pass(&model, seq, noise, markovian)?;
    Ok(ObjectiveBreakdown {
        recon_loglik: pass.recon.item(),
        kl_total: pass.kl.item(),
        adv_gen: 0.0,
        adv_disc: 0.0,
        combined: pass.elbo.item(),
        kl_per_step: pass.kl_per_step,
    })
}

/// ELBO plus the `lambda_adv`-weighted generator-side adversarial term.
pub fn combined_objective(
    params: &ModelParams,
    seq: &Sequence,
    noise: &SequenceNoise,
    lambda_adv: f64,
    markovian: bool,
) -> Result<ObjectiveBreakdown> {
    let tape = Tape::new();
    let model = BoundModel::new(&tape, params, &[]);
    Ok(combined_pass(&model, seq, noise, lambda_adv, markovian)?.0)
}

/// Mean and standard error of the ELBO over `draws` independent noise draws.
pub fn averaged_elbo(params: &ModelParams, seq: &Sequence, draws: usize, markovian: bool, rng: &mut Rng) -> Result<(f64, f64)> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    let n_z = params.spec().n_z;
    let vals: Vec<f64> = (0..draws)
        .map(|_| {
            let noise: Vec<Vec<f64>> = (0..seq.len()).map(|_| rng.normals(n_z)).collect();
            sequence_elbo(params, seq, &noise, markovian).map(|b| b.elbo())
        })
        .collect::<Result<_>>()?;
    let n = draws as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if draws > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}
