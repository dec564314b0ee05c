mod common;

use std::collections::BTreeMap;

use avfp_core::data::surrogate::{self, SurrogateConfig};
use avfp_core::data::{normalize, Dataset, Split};
use avfp_core::eval::{
    emit_plot_data, predict_rul, rmse, run_experiment, run_experiment_with_seeds, PredictionMode, PredictionSet,
};
use avfp_core::{Group, ModelParams, NetworkSpec, Rng};
use common::{quick_config, small_fleet};
use proptest::prelude::*;

fn set(pairs: &[(f64, f64)]) -> PredictionSet {
    PredictionSet { entries: pairs.iter().enumerate().map(|(i, &p)| (i as u32 + 1, p)).collect() }
}

#[test]
fn constant_offset_gives_offset() {
    let pairs: Vec<(f64, f64)> = (0..9).map(|i| (i as f64 * 7.0 + 10.0, i as f64 * 7.0)).collect();
    assert!((rmse(&set(&pairs)).unwrap() - 10.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rmse_permutation_and_scale(pairs in prop::collection::vec((0.0..300.0f64, 0.0..300.0f64), 1..30), seed in any::<u64>(), c in 0.01..100.0f64) {
        let base = rmse(&set(&pairs)).unwrap();
        let mut shuffled = pairs.clone();
        Rng::stream(seed, 0).shuffle(&mut shuffled);
        prop_assert!((rmse(&set(&shuffled)).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
        let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(p, t)| (c * p, c * t)).collect();
        prop_assert!((rmse(&set(&scaled)).unwrap() - c * base).abs() <= 1e-9 * (1.0 + c * base));
    }
}

/// Normalized surrogate train/test pair with its ground truth.
fn fleet(seed: u64) -> (Dataset, Dataset, BTreeMap<u32, f64>, NetworkSpec) {
    let cfg = SurrogateConfig { units: 6, test_units: 5, min_life: 25, max_life: 45 };
    let (train, test, truth) = surrogate::generate(&cfg, seed);
    let (train, stats) = normalize(&train, None).unwrap();
    let (test, _) = normalize(&test, Some(&stats)).unwrap();
    let spec = NetworkSpec::sized(stats.sensors.len(), stats.settings.len(), 2, 6, 6);
    (train, test, truth, spec)
}

#[test]
fn constant_head_predicts_constant() {
    let (_, test, truth, spec) = fleet(51);
    let mut params = ModelParams::init(&spec, &mut Rng::stream(51, 0)).unwrap();
    let layout = params.layout().clone();
    for id in params.ids_in(Group::Rho).collect::<Vec<_>>() {
        let n = params.get(id).len();
        params.set(id, &vec![0.0; n]).unwrap();
    }
    // softplus(b) = 37 exactly up to rounding of the inverse.
    let c: f64 = 37.0;
    params.set(layout.rul_out.b, &[c.exp_m1().ln()]).unwrap();
    let p = predict_rul(&params, &test, &truth, PredictionMode::Supervised, None, 125.0).unwrap();
    assert_eq!(p.len(), test.n_units());
    for (pred, _) in p.entries.values() {
        assert!((pred - c).abs() < 1e-12, "{pred}");
    }
}

#[test]
fn predictions_independent_of_unit_order() {
    let (train, test, truth, spec) = fleet(52);
    let params = ModelParams::init(&spec, &mut Rng::stream(52, 0)).unwrap();
    // Relabel units n..1 so they are visited in reverse.
    let n = test.n_units() as u32;
    let mut reversed = test.clone();
    reversed.units = test
        .units
        .iter()
        .map(|(&id, recs)| {
            let new = n + 1 - id;
            (new, recs.iter().map(|r| avfp_core::data::TrajectoryRecord { unit_id: new, ..r.clone() }).collect())
        })
        .collect();
    let rev_truth: BTreeMap<u32, f64> = truth.iter().map(|(&id, &t)| (n + 1 - id, t)).collect();
    for mode in [PredictionMode::Supervised, PredictionMode::HealthIndex] {
        let a = predict_rul(&params, &test, &truth, mode, Some(&train), 125.0).unwrap();
        let b = predict_rul(&params, &reversed, &rev_truth, mode, Some(&train), 125.0).unwrap();
        for (id, v) in &a.entries {
            assert_eq!(b.entries[&(n + 1 - id)], *v, "{mode:?} unit {id}");
        }
        // Supervised and health-index readouts use latent means only.
        assert_eq!(a, predict_rul(&params, &test, &truth, mode, Some(&train), 125.0).unwrap());
        assert!(a.entries.values().all(|(p, _)| *p >= 0.0));
    }
}

#[test]
fn health_index_retrieves_exact_prefix() {
    let (train, _, _, spec) = fleet(53);
    let params = ModelParams::init(&spec, &mut Rng::stream(53, 0)).unwrap();
    let cap = 20.0;
    let mut cuts = Vec::new();
    let mut truth = BTreeMap::new();
    for (k, (&id, recs)) in train.units.iter().enumerate() {
        let len = recs.len() / 3 + 2 * k;
        cuts.push((id, len));
        truth.insert(id, (recs.len() - len) as f64);
    }
    let test = train.truncated(&cuts).unwrap();
    assert_eq!(test.split, Split::Test);
    let p = predict_rul(&params, &test, &truth, PredictionMode::HealthIndex, Some(&train), cap).unwrap();
    for (id, (pred, t)) in &p.entries {
        assert_eq!(*pred, t.min(cap), "unit {id}");
    }
}

#[test]
fn repeated_seed_has_zero_spread() {
    let (data, spec) = small_fleet(54);
    let cfg = quick_config(54);
    let s = run_experiment_with_seeds(&data, &spec, &cfg, &[54, 54, 54]).unwrap();
    assert_eq!(s.completed, 3);
    assert_eq!(s.std, Some(0.0));
    assert_eq!(s.mean, s.min);

    let one = run_experiment(&data, &spec, &cfg, 1).unwrap();
    assert_eq!(one.std, Some(0.0));
    assert_eq!(one.mean, one.runs[0].test_rmse);
    assert_eq!(one.min, one.mean);
    assert_eq!(one.runs[0].seed, cfg.seed);
    assert_eq!(one.runs[0], s.runs[0]);
}

#[test]
fn summary_json_matches_curves_csv() {
    let (data, spec) = small_fleet(55);
    let cfg = quick_config(55);
    let summary = run_experiment(&data, &spec, &cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (curves, json) = emit_plot_data(&summary, dir.path()).unwrap();

    let mut rows: Vec<(usize, u64, f64, bool, bool)> = Vec::new();
    let mut reader = csv::Reader::from_path(&curves).unwrap();
    assert_eq!(&reader.headers().unwrap().iter().take(3).collect::<Vec<_>>(), &["run", "step", "rmse"]);
    for rec in reader.records() {
        let rec = rec.unwrap();
        rows.push((rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap(), &rec[4] == "1", &rec[5] == "1"));
    }
    // One row per evaluation point of every run.
    let evals: usize = summary.runs.iter().map(|r| r.curve.len()).sum();
    assert_eq!(rows.len(), evals);

    // Per-run selected rows, then population statistics in run order.
    let mut best = vec![None; 3];
    for &(run, step, v, selected, _) in &rows {
        if selected {
            assert!(best[run].is_none());
            best[run] = Some((step, v));
        }
    }
    let vals: Vec<f64> = best.iter().map(|b| b.unwrap().1).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (arg, min) = vals.iter().enumerate().fold((0, vals[0]), |b, (i, &v)| if v < b.1 { (i, v) } else { b });

    let j: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(j["mean"].as_f64().unwrap(), mean);
    assert_eq!(j["std"].as_f64().unwrap(), std);
    assert_eq!(j["min"].as_f64().unwrap(), min);
    assert_eq!(j["argmin_run"].as_u64().unwrap() as usize, arg);
    assert_eq!(j["argmin_step"].as_u64().unwrap(), best[arg].unwrap().0);
    assert!(min <= mean && std >= 0.0);

    // Exactly one global-minimum row, holding the smallest rmse.
    let marked: Vec<_> = rows.iter().filter(|r| r.4).collect();
    assert_eq!(marked.len(), 1);
    assert!(rows.iter().all(|r| r.2 >= marked[0].2));

    let first = (std::fs::read(&curves).unwrap(), std::fs::read(&json).unwrap());
    emit_plot_data(&summary, dir.path()).unwrap();
    assert_eq!(first, (std::fs::read(&curves).unwrap(), std::fs::read(&json).unwrap()));
}

#[test]
fn empty_summary_is_rejected() {
    let s = avfp_core::eval::RunSummary::from_runs(Vec::new());
    assert!(emit_plot_data(&s, tempfile::tempdir().unwrap().path()).is_err());
}
