mod common;

use avfp_core::data::Sequence;
use avfp_core::diff::{grad_check, grad_check_five_point, Tape, Tensor, Var};
use avfp_core::model::{BoundModel, GaussianVar};
use avfp_core::objectives::*;
use avfp_core::{GaussianDiag, Group, ModelParams, NetworkSpec, ParamId, Rng};
use avfp_core::training::{TrainConfig, Trainer, TrainingData};
use proptest::prelude::*;

fn tiny() -> NetworkSpec {
    NetworkSpec::sized(3, 2, 2, 4, 5)
}

fn toy_sequence(rng: &mut Rng, steps: usize) -> Sequence {
    let x = (0..steps).map(|_| rng.normals(3)).collect();
    let u = (0..steps).map(|_| rng.normals(2)).collect();
    Sequence::new(x, u).unwrap()
}

fn random_gaussian(rng: &mut Rng, n: usize) -> GaussianDiag {
    let mean = (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let log_var = (0..n).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    GaussianDiag::new(mean, log_var).unwrap()
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

#[test]
fn gaussian_log_density_gradients() {
    let mut rng = Rng::stream(11, 0);
    for _ in 0..20 {
        let g = random_gaussian(&mut rng, 3);
        let x = rng.normals(3);
        let err = grad_check(
            |_, v| gaussian_log_density_var(v[0], &GaussianVar { mean: v[1], log_var: v[2] }),
            &[vector(&x), vector(g.mean()), vector(g.log_var())],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn kl_gradients() {
    let mut rng = Rng::stream(12, 0);
    for _ in 0..20 {
        let (q, p) = (random_gaussian(&mut rng, 3), random_gaussian(&mut rng, 3));
        let err = grad_check(
            |_, v| kl_diag_var(&GaussianVar { mean: v[0], log_var: v[1] }, &GaussianVar { mean: v[2], log_var: v[3] }),
            &[vector(q.mean()), vector(q.log_var()), vector(p.mean()), vector(p.log_var())],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn adversarial_loss_gradients() {
    let mut rng = Rng::stream(13, 0);
    for _ in 0..20 {
        let probs: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.05, 0.95)).collect();
        let params: Vec<Tensor> = probs.iter().map(|&p| Tensor::scalar(p).unwrap()).collect();
        for which in 0..2 {
            let err = grad_check(
                |_, v| {
                    let (d, g) = adversarial_losses_var(&v[..3], &v[3..])?;
                    Ok(if which == 0 { d } else { g })
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
        // Generator loss against fake logits, the form used in training.
        let logits: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(rng.uniform_range(-3.0, 3.0)).unwrap()).collect();
        let err = grad_check(|_, v| Ok(adversarial_losses_from_logits(&v[..2], &v[2..])?.1), &logits, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

fn model_grad_check(
    seed: u64,
    eval: impl for<'t> Fn(&BoundModel<'t, '_>) -> avfp_core::Result<Var<'t>>,
) -> f64 {
    let p = ModelParams::init(&tiny(), &mut Rng::stream(seed, 1)).unwrap();
    let ids: Vec<ParamId> = p.ids().collect();
    let tensors: Vec<Tensor> = ids.iter().map(|&id| p.get(id).clone()).collect();
    grad_check_five_point(
        |tape, vars| {
            let m = BoundModel::with_vars(tape, &p, &ids, vars)?;
            eval(&m)
        },
        &tensors,
        3e-3,
    )
    .unwrap()
}

#[test]
fn sequence_elbo_gradients() {
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, 2);
        let seq = toy_sequence(&mut rng, 5);
        let noise = SequenceNoise::draw(&mut rng, 5, 2);
        let markovian = seed % 2 == 1;
        let err = model_grad_check(seed, |m| Ok(elbo_pass(m, &seq, &noise.posterior, markovian)?.elbo));
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn combined_objective_gradients() {
    for seed in 0..20 {
        let mut rng = Rng::stream(seed, 3);
        let seq = toy_sequence(&mut rng, 5);
        let noise = SequenceNoise::draw(&mut rng, 5, 2);
        let err = model_grad_check(100 + seed, |m| Ok(combined_pass(m, &seq, &noise, 0.7, false)?.1));
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

const KL_STREAM: u64 = 16;

#[test]
fn closed_form_kl_matches_monte_carlo() {
    // Each pair passes a 3 SE band with probability 0.9973, so a fixed stream
    // is pinned; the z-score spread below is the seed-independent check.
    let mut rng = Rng::stream(KL_STREAM, 0);
    let samples = 1_000_000;
    let mut z_sq = 0.0;
    for pair in 0..100 {
        let n = 1 + pair % 3;
        let (q, p) = (random_gaussian(&mut rng, n), random_gaussian(&mut rng, n));
        let closed = kl_diag_gaussians(&q, &p).unwrap();
        // Independent oracle: log q - log p evaluated directly on draws from q.
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let log_density = |g: &GaussianDiag, x: &[f64]| -> f64 {
            x.iter()
                .zip(g.mean())
                .zip(g.log_var())
                .map(|((x, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp()))
                .sum()
        };
        let mut x = vec![0.0; n];
        for _ in 0..samples {
            for i in 0..n {
                x[i] = q.mean()[i] + (0.5 * q.log_var()[i]).exp() * rng.normal();
            }
            let d = log_density(&q, &x) - log_density(&p, &x);
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((closed - mean).abs() <= 3.0 * se + 1e-12, "pair {pair}: {closed} vs {mean} ± {se}");
        z_sq += ((closed - mean) / se).powi(2);
    }
    // Mean squared z-score of 100 standard normals: 1 ± 0.14.
    let spread = z_sq / 100.0;
    assert!((0.5..1.6).contains(&spread), "{spread}");
}

#[test]
fn kl_hand_values() {
    let std1 = GaussianDiag::standard(1);
    let shifted = GaussianDiag::new(vec![1.0], vec![0.0]).unwrap();
    assert!((kl_diag_gaussians(&shifted, &std1).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(kl_diag_gaussians(&std1, &std1).unwrap(), 0.0);
}

#[test]
fn log_density_integrates_to_one() {
    for (m, var) in [(0.0, 1.0), (2.5, 0.04), (-1.0, 9.0)] {
        let g = GaussianDiag::new(vec![m], vec![f64::ln(var)]).unwrap();
        let s = f64::sqrt(var);
        let n = 20_000;
        let h = 16.0 * s / n as f64;
        // Composite Simpson over ±8σ.
        let mut acc = 0.0;
        for i in 0..=n {
            let x = m - 8.0 * s + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * gaussian_log_density(&[x], &g).unwrap().exp();
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn adversarial_loss_hand_values() {
    let (d, g) = adversarial_losses(&[0.5, 0.5], &[0.5]).unwrap();
    assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!((g - std::f64::consts::LN_2).abs() < 1e-15);
    let (d, _) = adversarial_losses(&[1.0 - 1e-12], &[1e-12]).unwrap();
    assert!(d < 1e-11);
    assert!(adversarial_losses(&[1.0], &[0.5]).is_err());
    assert!(adversarial_losses(&[0.5], &[0.0]).is_err());
}

#[test]
fn zero_network_single_step_elbo() {
    let p = ModelParams::zeros(&tiny()).unwrap();
    let seq = Sequence::new(vec![vec![0.0; 3]], vec![vec![0.0; 2]]).unwrap();
    let b = sequence_elbo(&p, &seq, &[vec![0.0, 0.0]], false).unwrap();
    let want = -1.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((b.elbo() - want).abs() < 1e-12);
    assert_eq!(b.kl_total, 0.0);
}

#[test]
fn combined_objective_degenerate_weights() {
    let mut rng = Rng::stream(15, 0);
    let seq = toy_sequence(&mut rng, 6);
    let noise = SequenceNoise::draw(&mut rng, 6, 2);
    let mut p = ModelParams::init(&tiny(), &mut Rng::stream(4, 1)).unwrap();
    let elbo = sequence_elbo(&p, &seq, &noise.posterior, false).unwrap();
    let c0 = combined_objective(&p, &seq, &noise, 0.0, false).unwrap();
    assert_eq!(c0.combined.to_bits(), elbo.elbo().to_bits());

    for id in p.ids_in(Group::Psi).collect::<Vec<_>>() {
        let n = p.get(id).len();
        p.set(id, &vec![0.0; n]).unwrap();
    }
    let elbo = sequence_elbo(&p, &seq, &noise.posterior, false).unwrap();
    let c1 = combined_objective(&p, &seq, &noise, 1.0, false).unwrap();
    assert!((c1.adv_gen - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((c1.combined - (elbo.elbo() - std::f64::consts::LN_2)).abs() < 1e-12);
    assert!(combined_objective(&p, &seq, &noise, -0.1, false).is_err());
}

#[test]
fn averaging_reduces_estimator_variance() {
    let mut rng = Rng::stream(16, 0);
    let seq = toy_sequence(&mut rng, 8);
    let p = ModelParams::init(&tiny(), &mut Rng::stream(5, 1)).unwrap();
    let spread = |draws: usize, rng: &mut Rng| {
        let vals: Vec<f64> = (0..40).map(|_| averaged_elbo(&p, &seq, draws, false, rng).unwrap().0).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let one = spread(1, &mut rng);
    let many = spread(64, &mut rng);
    assert!(many < one / 8.0, "{many} vs {one}");
}

#[test]
fn elbo_rejects_bad_inputs() {
    let p = ModelParams::init(&tiny(), &mut Rng::stream(0, 1)).unwrap();
    let seq = toy_sequence(&mut Rng::stream(0, 9), 4);
    assert!(sequence_elbo(&p, &seq, &vec![vec![0.0; 2]; 3], false).is_err());
    let wrong = Sequence::observations(vec![vec![0.0; 4]; 4]).unwrap();
    assert!(sequence_elbo(&p, &wrong, &vec![vec![0.0; 2]; 4], false).is_err());
}

fn gaussian_strategy(n: usize) -> impl Strategy<Value = GaussianDiag> {
    (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-3.0..3.0f64, n))
        .prop_map(|(m, lv)| GaussianDiag::new(m, lv).unwrap())
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(q in gaussian_strategy(3), p in gaussian_strategy(3)) {
        let kl = kl_diag_gaussians(&q, &p).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_diag_gaussians(&q, &q).unwrap() <= 1e-12);
    }

    #[test]
    fn log_density_peaks_at_the_mean(g in gaussian_strategy(2), dx in prop::collection::vec(-3.0..3.0f64, 2)) {
        let at_mean = gaussian_log_density(g.mean(), &g).unwrap();
        let x: Vec<f64> = g.mean().iter().zip(&dx).map(|(m, d)| m + d).collect();
        prop_assert!(gaussian_log_density(&x, &g).unwrap() <= at_mean);
    }

    #[test]
    fn disc_loss_is_at_least_zero(real in prop::collection::vec(0.01..0.99f64, 1..6), fake in prop::collection::vec(0.01..0.99f64, 1..6)) {
        let (d, g) = adversarial_losses(&real, &fake).unwrap();
        prop_assert!(d > 0.0 && g > 0.0);
    }
}

#[test]
fn tape_values_match_plain_evaluation() {
    let tape = Tape::new();
    let mean = tape.vector(vec![0.2, -0.4]).unwrap();
    let log_var = tape.vector(vec![0.1, 0.3]).unwrap();
    let x = tape.vector(vec![1.0, 0.0]).unwrap();
    let v = gaussian_log_density_var(x, &GaussianVar { mean, log_var }).unwrap().item();
    let g = GaussianDiag::new(vec![0.2, -0.4], vec![0.1, 0.3]).unwrap();
    assert_eq!(v.to_bits(), gaussian_log_density(&[1.0, 0.0], &g).unwrap().to_bits());
}

/// Pooled recognition and ancestral prior samples over every step of `seqs`.
fn latent_samples(params: &ModelParams, seqs: &[Sequence], seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_z = params.spec().n_z;
    let mut rng = Rng::stream(seed, 0);
    let (mut post, mut prior) = (Vec::new(), Vec::new());
    for seq in seqs {
        let tape = Tape::new();
        let model = BoundModel::new(&tape, params, &[]);
        let noise = SequenceNoise::draw(&mut rng, seq.len(), n_z);
        for z in recognition_samples(&model, seq, &noise.posterior).unwrap() {
            post.push(z.value().data().to_vec());
        }
        for z in sample_prior_sequence(&model, seq, &noise.prior, false).unwrap() {
            prior.push(z.value().data().to_vec());
        }
    }
    (post, prior)
}

/// V-statistic energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`.
fn energy_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mean_dist = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter().map(|p| b.iter().map(|q| dist(p, q)).sum::<f64>()).sum::<f64>() / (a.len() * b.len()) as f64
    };
    2.0 * mean_dist(xs, ys) - mean_dist(xs, xs) - mean_dist(ys, ys)
}

#[test]
fn training_pulls_posterior_towards_prior() {
    let (_, seqs) = common::linear_gaussian_fleet(40, 25, 41);
    let spec = NetworkSpec::sized(3, 0, 2, 8, 8);
    let data = TrainingData::unsupervised(seqs[..16].to_vec());
    let cfg = TrainConfig {
        seed: 41,
        epochs: 60,
        trajectories_per_batch: 8,
        lr: 3e-3,
        lambda_adv: 1.0,
        rul_supervision: false,
        validation_fraction: 0.0,
        eval_every: 1000,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&data, &spec, &cfg).unwrap();
    let before = trainer.state().params.clone();
    trainer.run().unwrap();
    let after = trainer.into_state().params;
    let (p0, q0) = latent_samples(&before, &seqs, 42);
    let (p1, q1) = latent_samples(&after, &seqs, 42);
    assert_eq!(p0.len(), 1000);
    let (d0, d1) = (energy_distance(&p0, &q0), energy_distance(&p1, &q1));
    // Two independent prior draws give the sampling floor of the estimator;
    // the untrained gap must stand clear of it and training must close most
    // of it.
    let (_, q2) = latent_samples(&after, &seqs, 43);
    let floor = energy_distance(&q1, &q2);
    assert!(d0 > 2.0 * floor, "{d0} vs floor {floor}");
    assert!(d1 < 0.5 * d0, "{d0} -> {d1}");
}
