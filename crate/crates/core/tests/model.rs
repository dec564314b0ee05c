use avfp_core::data::Sequence;
use avfp_core::eval::supervised_rul;
use avfp_core::model::{BoundModel, GaussianVar};
use avfp_core::objectives::{adversarial_losses_from_logits, filter_means};
use avfp_core::training::{adam_step, AdamConfig, OptimizerState};
use avfp_core::{GaussianDiag, Group, ModelParams, NetworkSpec, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn vector<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Tensor::vector(v.to_vec()).unwrap())
}

#[test]
fn reparameterized_samples_average_to_the_mean() {
    let g = GaussianDiag::new(vec![1.5, -0.3, 0.0], vec![0.4, -1.0, 2.0]).unwrap();
    let std = g.std();
    let n = 100_000;
    let mut rng = Rng::stream(31, 0);
    let mut sum = vec![0.0; 3];
    for _ in 0..n {
        for (s, v) in sum.iter_mut().zip(g.sample_reparam(&rng.normals(3)).unwrap()) {
            *s += v;
        }
    }
    for k in 0..3 {
        let mean = sum[k] / n as f64;
        assert!((mean - g.mean()[k]).abs() < 4.0 * std[k] / (n as f64).sqrt(), "coordinate {k}: {mean}");
    }
}

#[test]
fn sample_average_moves_one_for_one_with_the_mean() {
    // Finite differences of the average over fixed noise, taken directly on
    // the value path.
    let mut rng = Rng::stream(32, 0);
    let noise: Vec<Vec<f64>> = (0..500).map(|_| rng.normals(2)).collect();
    let average = |mean: &[f64]| {
        let g = GaussianDiag::new(mean.to_vec(), vec![0.3, -0.7]).unwrap();
        let mut acc = [0.0; 2];
        for e in &noise {
            let s = g.sample_reparam(e).unwrap();
            acc[0] += s[0];
            acc[1] += s[1];
        }
        acc.map(|a| a / noise.len() as f64)
    };
    let h = 1e-5;
    for k in 0..2 {
        let mut up = [0.2, -0.4];
        let mut down = up;
        up[k] += h;
        down[k] -= h;
        let (a, b) = (average(&up), average(&down));
        for j in 0..2 {
            let d = (a[j] - b[j]) / (2.0 * h);
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-8, "d mean_{j} / d mu_{k} = {d}");
        }
    }
}

#[test]
fn discriminator_separates_two_clusters() {
    let spec = NetworkSpec::sized(1, 0, 1, 4, 8);
    let mut params = ModelParams::init(&spec, &mut Rng::stream(33, 0)).unwrap();
    let mut opt = OptimizerState::for_groups(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &params, &[Group::Psi]);
    let mut rng = Rng::stream(33, 1);
    let cluster = |rng: &mut Rng, centre: f64| -> Vec<f64> { (0..5).map(|_| centre + 0.5 * rng.normal()).collect() };
    for _ in 0..500 {
        let tape = Tape::new();
        let model = BoundModel::new(&tape, &params, &[Group::Psi]);
        let logits = |centre: f64, rng: &mut Rng| -> Vec<Var<'_>> {
            (0..8)
                .map(|_| {
                    let zs: Vec<Var> = cluster(rng, centre).iter().map(|&v| vector(&tape, &[v])).collect();
                    model.discriminator_logit(&zs).unwrap()
                })
                .collect()
        };
        let real = logits(1.5, &mut rng);
        let fake = logits(-1.5, &mut rng);
        let (disc, _) = adversarial_losses_from_logits(&real, &fake).unwrap();
        let grads = tape.backward(disc).unwrap();
        assert!(adam_step(&mut params, &grads, &mut opt).unwrap());
    }
    let tape = Tape::new();
    let model = BoundModel::new(&tape, &params, &[]);
    let mut total = 0.0;
    for _ in 0..200 {
        let zs: Vec<Var> = cluster(&mut rng, 1.5).iter().map(|&v| vector(&tape, &[v])).collect();
        total += model.discriminate(&zs).unwrap().item();
    }
    assert!(total / 200.0 > 0.9, "mean D on the real cluster {}", total / 200.0);
}

/// Units whose first sensor falls linearly to zero at failure, plus a noise
/// channel, with the exact (uncapped) remaining life as target.
fn linear_decay_units(n: usize, seed: u64) -> Vec<(Sequence, Vec<f64>)> {
    let mut rng = Rng::stream(seed, 0);
    (0..n)
        .map(|_| {
            let life = 40 + rng.below(41);
            let rul: Vec<f64> = (1..=life).map(|t| (life - t) as f64).collect();
            let x = rul.iter().map(|r| vec![r / 40.0 - 1.0 + 0.01 * rng.normal(), rng.normal()]).collect();
            (Sequence::observations(x).unwrap(), rul)
        })
        .collect()
}

#[test]
fn rul_head_learns_linear_decay() {
    let spec = NetworkSpec::sized(2, 0, 2, 8, 16);
    let mut params = ModelParams::init(&spec, &mut Rng::stream(34, 0)).unwrap();
    let train = linear_decay_units(8, 34);
    let held = linear_decay_units(4, 35);
    // Start the output at the mean target so the head only has to learn the
    // shape.
    let mean = train.iter().flat_map(|(_, r)| r).sum::<f64>() / train.iter().map(|(_, r)| r.len()).sum::<usize>() as f64;
    let b = params.layout().rul_out.b;
    params.set(b, &[mean.exp_m1().ln()]).unwrap();
    let mut opt = OptimizerState::for_groups(AdamConfig { lr: 2e-2, ..AdamConfig::default() }, &params, &[Group::Phi, Group::Rho]);
    for _ in 0..400 {
        let tape = Tape::new();
        let model = BoundModel::new(&tape, &params, &[Group::Phi, Group::Rho]);
        let mut loss: Option<Var> = None;
        let mut count = 0;
        for (seq, rul) in &train {
            for ((h, z), &y) in filter_means(&model, seq).unwrap().iter().zip(rul) {
                let e = model.rul_head(h, *z).unwrap().add_const(-y).unwrap().scale(0.01).unwrap().square().unwrap();
                loss = Some(match loss {
                    Some(l) => l.add(e).unwrap(),
                    None => e,
                });
                count += 1;
            }
        }
        let loss = loss.unwrap().scale(1.0 / count as f64).unwrap();
        let grads = tape.backward(loss).unwrap();
        adam_step(&mut params, &grads, &mut opt).unwrap();
    }
    let mut sq = 0.0;
    let mut n = 0;
    for (seq, rul) in &held {
        let lens: Vec<usize> = (1..=seq.len()).collect();
        for (p, y) in supervised_rul(&params, seq, &lens).unwrap().iter().zip(rul) {
            sq += (p - y).powi(2);
            n += 1;
        }
    }
    let rmse = (sq / n as f64).sqrt();
    assert!(rmse < 5.0, "held-out RMSE {rmse}");
}

#[test]
fn zero_rul_head_is_constant() {
    let spec = NetworkSpec::sized(2, 0, 2, 4, 4);
    let mut params = ModelParams::init(&spec, &mut Rng::stream(36, 0)).unwrap();
    for id in params.ids_in(Group::Rho).collect::<Vec<_>>() {
        let n = params.get(id).len();
        params.set(id, &vec![0.0; n]).unwrap();
    }
    for (seq, _) in linear_decay_units(3, 36) {
        let lens: Vec<usize> = (1..=seq.len()).collect();
        for p in supervised_rul(&params, &seq, &lens).unwrap() {
            assert_eq!(p, std::f64::consts::LN_2);
        }
    }
}

fn spec() -> NetworkSpec {
    NetworkSpec::sized(3, 2, 2, 5, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_stay_finite(seed in 0u64..10_000, scale in 0.1..50.0f64, xs in prop::collection::vec(-1e3..1e3f64, 3)) {
        let mut params = ModelParams::init(&spec(), &mut Rng::stream(seed, 0)).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let v: Vec<f64> = params.get(id).data().iter().map(|w| w * scale).collect();
            params.set(id, &v).unwrap();
        }
        let tape = Tape::new();
        let m = BoundModel::new(&tape, &params, &[]);
        let x = vector(&tape, &xs);
        let u = vector(&tape, &[xs[0], -xs[1]]);
        let h = m.encode_history(&m.initial_history(), x, Some(u), vector(&tape, &[xs[2], 0.0])).unwrap();
        let q = m.recognize(&h).unwrap();
        let g = m.advance_prior_history(&m.initial_prior_history(), q.mean, x, Some(u)).unwrap();
        let p = m.transition_prior(Some(q.mean), &g, false).unwrap();
        let e = m.emit(&g, q.mean, false).unwrap();
        let d = m.discriminate(&[q.mean, p.mean]).unwrap().item();
        let r = m.rul_head(&h, q.mean).unwrap().item();
        let all: Vec<&GaussianVar> = vec![&q, &p, &e];
        for gv in all {
            let v = gv.to_values();
            prop_assert!(v.mean().iter().chain(v.log_var()).all(|a| a.is_finite()));
            prop_assert!(v.log_var().iter().all(|a| a.abs() <= 10.0));
        }
        prop_assert!(d > 0.0 && d < 1.0);
        prop_assert!(r >= 0.0 && r.is_finite());
    }

    #[test]
    fn pooling_ignores_time_order(seed in 0u64..10_000, zs in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 2..8)) {
        let params = ModelParams::init(&spec(), &mut Rng::stream(seed, 0)).unwrap();
        let tape = Tape::new();
        let m = BoundModel::new(&tape, &params, &[]);
        let fwd: Vec<Var> = zs.iter().map(|z| vector(&tape, z)).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let (a, b) = (m.discriminate(&fwd).unwrap().item(), m.discriminate(&rev).unwrap().item());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn markovian_outputs_ignore_earlier_history(seed in 0u64..10_000, history in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 1..6)) {
        let params = ModelParams::init(&spec(), &mut Rng::stream(seed, 0)).unwrap();
        let tape = Tape::new();
        let m = BoundModel::new(&tape, &params, &[]);
        let z = vector(&tape, &[0.3, -0.6]);
        let mut g = m.initial_prior_history();
        for x in &history {
            g = m.advance_prior_history(&g, z, vector(&tape, x), Some(vector(&tape, &[x[0], x[1]]))).unwrap();
        }
        let fresh = m.initial_prior_history();
        prop_assert_eq!(m.transition_prior(Some(z), &g, true).unwrap().to_values(), m.transition_prior(Some(z), &fresh, true).unwrap().to_values());
        prop_assert_eq!(m.emit(&g, z, true).unwrap().to_values(), m.emit(&fresh, z, true).unwrap().to_values());
    }
}
