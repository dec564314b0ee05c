//! Self-check suites shared by the command line and the test targets:
//! gradient checks of every objective, the ELBO-versus-Kalman bound on
//! linear-Gaussian instances, and the one-dimensional GAN equilibrium.

use serde::{Deserialize, Serialize};

use crate::data::{gen_linear_gaussian, kalman_loglik, LinearGaussianSpec, Sequence};
use crate::diff::{grad_check, grad_check_five_point, sigmoid, ParamId, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{BoundModel, GaussianVar, Group, ModelParams, NetworkSpec};
use crate::objectives::{
    adversarial_losses_var, averaged_elbo, combined_pass, elbo_pass, gaussian_log_density_var, kl_diag_var,
    SequenceNoise,
};
use crate::rng::Rng;
use crate::training::{adam_step, maximize_elbo, AdamConfig, OptimizerState};

/// Pass threshold for [`gradcheck_suite`].
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub draws: usize,
    /// Largest relative error over all draws and coordinates.
    pub worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("nonempty")
}

fn toy_sequence(rng: &mut Rng, spec: &NetworkSpec, steps: usize) -> Sequence {
    let x = (0..steps).map(|_| rng.normals(spec.n_x)).collect();
    let u = (0..steps).map(|_| rng.normals(spec.n_u)).collect();
    Sequence::new(x, u).expect("consistent widths")
}

/// Whole-model objectives have gradient components down to 1e-8 against
/// values near 1e2, where central-difference roundoff alone exceeds the
/// tolerance; the five-point stencil at a moderate step resolves them.
fn model_check(
    params: &ModelParams,
    eval: impl for<'t> Fn(&BoundModel<'t, '_>) -> Result<Var<'t>>,
) -> Result<f64> {
    let ids: Vec<ParamId> = params.ids().collect();
    let tensors: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
    grad_check_five_point(
        |tape, vars| {
            let m = BoundModel::with_vars(tape, params, &ids, vars)?;
            eval(&m)
        },
        &tensors,
        3e-3,
    )
}

/// Gradient checks of every objective over `draws` random parameter draws
/// each. Sequence objectives use a small network and `T = 5`.
pub fn gradcheck_suite(draws: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let spec = NetworkSpec::sized(3, 2, 2, 4, 5);
    let mut rng = Rng::stream(seed, 0x4743);
    let mut worst = [0.0f64; 5];
    for _ in 0..draws {
        let (x, mean, lv) = (random_vec(&mut rng, 3, -2.0, 2.0), random_vec(&mut rng, 3, -2.0, 2.0), random_vec(&mut rng, 3, -1.5, 1.5));
        let e = grad_check(|_, v| gaussian_log_density_var(v[0], &GaussianVar { mean: v[1], log_var: v[2] }), &[x, mean, lv], 1e-6)?;
        worst[0] = worst[0].max(e);

        let qp: Vec<Tensor> = (0..4).map(|i| random_vec(&mut rng, 3, if i % 2 == 0 { -2.0 } else { -1.5 }, if i % 2 == 0 { 2.0 } else { 1.5 })).collect();
        let e = grad_check(
            |_, v| kl_diag_var(&GaussianVar { mean: v[0], log_var: v[1] }, &GaussianVar { mean: v[2], log_var: v[3] }),
            &qp,
            1e-6,
        )?;
        worst[1] = worst[1].max(e);

        let params = ModelParams::init(&spec, &mut Rng::stream(rng.next_u64(), 1))?;
        let seq = toy_sequence(&mut rng, &spec, 5);
        let noise = SequenceNoise::draw(&mut rng, 5, spec.n_z);
        worst[2] = worst[2].max(model_check(&params, |m| Ok(elbo_pass(m, &seq, &noise.posterior, false)?.elbo))?);

        let probs: Vec<Tensor> = (0..6).map(|_| Tensor::scalar(rng.uniform_range(0.05, 0.95)).expect("scalar")).collect();
        for which in 0..2 {
            let e = grad_check(
                |_, v| {
                    let (d, g) = adversarial_losses_var(&v[..3], &v[3..])?;
                    Ok(if which == 0 { d } else { g })
                },
                &probs,
                1e-6,
            )?;
            worst[3] = worst[3].max(e);
        }

        let lambda = rng.uniform_range(0.05, 1.0);
        worst[4] = worst[4].max(model_check(&params, |m| Ok(combined_pass(m, &seq, &noise, lambda, false)?.1))?);
    }
    let names = ["gaussian_log_density", "kl_diag_gaussians", "sequence_elbo", "adversarial_losses", "combined_objective"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| GradCheckReport { objective: n.to_string(), draws, worst: w })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInstance {
    pub n_z: usize,
    pub n_x: usize,
    pub steps: usize,
    pub exact: f64,
    pub elbo_before: f64,
    pub se_before: f64,
    pub elbo_after: f64,
    pub se_after: f64,
}

impl BoundInstance {
    /// The averaged ELBO stays below the exact log-likelihood up to three
    /// Monte Carlo standard errors, before and after training.
    pub fn bound_holds(&self) -> bool {
        self.elbo_before <= self.exact + 3.0 * self.se_before && self.elbo_after <= self.exact + 3.0 * self.se_after
    }

    pub fn gap_shrank(&self) -> bool {
        self.exact - self.elbo_after < self.exact - self.elbo_before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub instances: usize,
    pub train_steps: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { instances: 20, train_steps: 2000, draws: 256, seed: 0 }
    }
}

/// For each random linear-Gaussian instance (`n_z <= 3`, `n_x <= 4`,
/// `T <= 30`) the generative networks are set to the true model, so the
/// exact log-likelihood bounds the ELBO for any recognition network. The
/// recognition network is then trained by ELBO ascent and the bound
/// re-checked.
pub fn kalman_bound_suite(cfg: &OracleConfig) -> Result<Vec<BoundInstance>> {
    let mut out = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances as u64 {
        let mut rng = Rng::stream(cfg.seed, 0x4B41_4C00 + i);
        let n_z = 1 + rng.below(3);
        let n_x = 1 + rng.below(4);
        let steps = 10 + rng.below(21);
        let lg = LinearGaussianSpec::random(&mut rng, n_z, n_x);
        let seq = gen_linear_gaussian(&lg, steps, rng.next_u64())?;
        let exact = kalman_loglik(&lg, &seq)?;

        let mut params = ModelParams::init(&NetworkSpec::sized(n_x, 0, n_z, 8, 8), &mut rng)?;
        params.set_linear_gaussian(&lg.a, &lg.c, &lg.q, &lg.r)?;
        let mut eval_rng = Rng::stream(cfg.seed, 0x4556_0000 + i);
        let (elbo_before, se_before) = averaged_elbo(&params, &seq, cfg.draws, false, &mut eval_rng)?;
        let adam = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
        maximize_elbo(&mut params, &[Group::Phi], std::slice::from_ref(&seq), cfg.train_steps, adam, 5.0, cfg.seed ^ i, false)?;
        let (elbo_after, se_after) = averaged_elbo(&params, &seq, cfg.draws, false, &mut eval_rng)?;
        out.push(BoundInstance { n_z, n_x, steps, exact, elbo_before, se_before, elbo_after, se_after });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGanReport {
    /// Mean discriminator output on a fresh real batch.
    pub d_real: f64,
    /// Mean discriminator output on a fresh generated batch.
    pub d_fake: f64,
    pub gen_mean: f64,
    pub gen_std: f64,
}

/// One-dimensional GAN: real data `N(real_mean, real_var)`, generator the
/// affine map `a * e + b` of unit noise, discriminator logistic in
/// `(x, x^2)`. Trained with alternating single Adam steps on the
/// discriminator loss and the non-saturating generator loss.
pub fn toy_gan(real_mean: f64, real_var: f64, steps: usize, batch: usize, seed: u64) -> Result<ToyGanReport> {
    let scalar = |v: f64| Tensor::scalar(v).expect("scalar");
    // [w1, w2, c] then [a, b].
    let mut disc = vec![scalar(0.0), scalar(0.0), scalar(0.0)];
    let mut gen = vec![scalar(1.0), scalar(0.0)];
    let adam = AdamConfig { lr: 1e-2, beta1: 0.5, ..AdamConfig::default() };
    let mut disc_opt = OptimizerState::new(adam, (0..3).map(|i| (ParamId(i), 1)));
    let mut gen_opt = OptimizerState::new(adam, (0..2).map(|i| (ParamId(i), 1)));
    let real_std = real_var.sqrt();

    fn logit<'t>(d: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        d[0].mul(x)?.add(d[1].mul(x.square()?)?)?.add(d[2])
    }
    fn mean_of(vs: Vec<Var<'_>>) -> Result<Var<'_>> {
        let n = vs.len() as f64;
        let mut acc = vs[0];
        for v in &vs[1..] {
            acc = acc.add(*v)?;
        }
        acc.scale(1.0 / n)
    }

    for step in 0..steps as u64 {
        let mut rng = Rng::stream(seed, step);
        let real: Vec<f64> = (0..batch).map(|_| real_mean + real_std * rng.normal()).collect();
        let noise = rng.normals(batch);

        let tape = Tape::new();
        let d: Vec<Var<'_>> = disc.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t.clone())).collect();
        let (a, b) = (gen[0].item(), gen[1].item());
        let mut terms = Vec::with_capacity(2 * batch);
        for &x in &real {
            terms.push(logit(&d, tape.scalar(x)?)?.neg()?.softplus()?);
        }
        for &e in &noise {
            terms.push(logit(&d, tape.scalar(a * e + b)?)?.softplus()?);
        }
        let loss = mean_of(terms)?.scale(2.0)?;
        adam_step(&mut disc, &tape.backward(loss)?, &mut disc_opt)?;

        let tape = Tape::new();
        let g: Vec<Var<'_>> = gen.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t.clone())).collect();
        let d: Vec<Var<'_>> = disc.iter().map(|t| tape.constant(t.clone())).collect();
        let mut terms = Vec::with_capacity(batch);
        for &e in &noise {
            let x = g[0].scale(e)?.add(g[1])?;
            terms.push(logit(&d, x)?.neg()?.softplus()?);
        }
        adam_step(&mut gen, &tape.backward(mean_of(terms)?)?, &mut gen_opt)?;
    }

    let mut rng = Rng::stream(seed, u64::MAX);
    let n = 10_000;
    let d = |x: f64| sigmoid(disc[0].item() * x + disc[1].item() * x * x + disc[2].item());
    let (a, b) = (gen[0].item(), gen[1].item());
    let d_real = (0..n).map(|_| d(real_mean + real_std * rng.normal())).sum::<f64>() / n as f64;
    let fake: Vec<f64> = (0..n).map(|_| a * rng.normal() + b).collect();
    let d_fake = fake.iter().map(|&x| d(x)).sum::<f64>() / n as f64;
    let gen_mean = fake.iter().sum::<f64>() / n as f64;
    let gen_std = (fake.iter().map(|x| (x - gen_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(ToyGanReport { d_real, d_fake, gen_mean, gen_std })
}
