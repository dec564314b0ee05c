mod common;

use std::collections::BTreeMap;

use avfp_core::data::surrogate::{self, SurrogateConfig};
use avfp_core::data::{
    build_rul_targets, gen_linear_gaussian, gen_linear_gaussian_with_states, kalman_loglik, load_test_rul, normalize,
    parse_cmapss, parse_cmapss_str, serialize_cmapss, write_normalized_csv, Channels, Dataset, LinearGaussianSpec,
    Sequence, Split, TrajectoryRecord, DEFAULT_RUL_CAP,
};
use avfp_core::{Error, Rng};
use common::{scan_counts, scan_rul};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fleet_files(seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SurrogateConfig { units: 9, test_units: 6, min_life: 30, max_life: 80 };
    surrogate::write_files(dir.path(), &cfg, seed, "T").unwrap();
    dir
}

#[test]
fn parse_counts_match_independent_scan() {
    let dir = fleet_files(1);
    for (name, split) in [("train_T.txt", Split::Train), ("test_T.txt", Split::Test)] {
        let path = dir.path().join(name);
        let ds = parse_cmapss(&path, split).unwrap();
        assert_eq!((ds.n_units(), ds.n_rows()), scan_counts(&path), "{name}");
        for recs in ds.units.values() {
            assert!(recs.iter().all(|r| r.op_settings.len() == 3 && r.sensors.len() == 21));
        }
    }
}

#[test]
fn short_row_names_its_line() {
    let dir = fleet_files(2);
    let text = std::fs::read_to_string(dir.path().join("train_T.txt")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let f: Vec<&str> = lines[4].split_whitespace().collect();
    lines[4] = f[..25].join(" ");
    match parse_cmapss_str(&lines.join("\n"), Split::Train) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn test_rul_matches_reread() {
    let dir = fleet_files(3);
    let test = parse_cmapss(dir.path().join("test_T.txt"), Split::Test).unwrap();
    let path = dir.path().join("RUL_T.txt");
    let rul = load_test_rul(&path, &test).unwrap();
    let want = scan_rul(&path);
    assert_eq!(rul.len(), want.len());
    for (i, v) in want.iter().enumerate() {
        assert_eq!(rul[&(i as u32 + 1)], *v);
    }

    std::fs::write(&path, "12\n-3\n4\n5\n6\n7\n").unwrap();
    assert!(load_test_rul(&path, &test).is_err());
    std::fs::write(&path, "12\n3\n").unwrap();
    assert!(matches!(load_test_rul(&path, &test), Err(Error::Data(_))));
}

#[test]
fn normalized_train_is_standardized() {
    let dir = fleet_files(4);
    let train = parse_cmapss(dir.path().join("train_T.txt"), Split::Train).unwrap();
    let (norm, stats) = normalize(&train, None).unwrap();
    // The surrogate holds six sensors and one setting constant.
    assert_eq!(stats.dropped.len(), 7);
    assert_eq!(norm.channels.sensors.len(), 15);
    for name in &stats.dropped {
        assert!(!norm.channels.sensors.contains(name) && !norm.channels.settings.contains(name));
    }
    let rows: Vec<Vec<f64>> =
        norm.units.values().flatten().map(|r| r.op_settings.iter().chain(&r.sensors).copied().collect()).collect();
    let n = rows.len() as f64;
    for k in 0..rows[0].len() {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        let std = (rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9, "channel {k}: mean {mean}");
        assert!((std - 1.0).abs() < 1e-9, "channel {k}: std {std}");
    }
}

#[test]
fn train_statistics_on_shifted_copy() {
    let dir = fleet_files(5);
    let train = parse_cmapss(dir.path().join("train_T.txt"), Split::Train).unwrap();
    let (_, stats) = normalize(&train, None).unwrap();
    let shift: Vec<f64> = (0..21).map(|k| 0.5 + k as f64).collect();
    let mut shifted = train.clone();
    for r in shifted.units.values_mut().flatten() {
        for (s, d) in r.sensors.iter_mut().zip(&shift) {
            *s += d;
        }
    }
    let (out, _) = normalize(&shifted, Some(&stats)).unwrap();
    let n = out.n_rows() as f64;
    for (j, c) in stats.sensors.iter().enumerate() {
        let k = Channels::raw().sensors.iter().position(|s| *s == c.name).unwrap();
        let mean = out.units.values().flatten().map(|r| r.sensors[j]).sum::<f64>() / n;
        assert!((mean - shift[k] / c.std).abs() < 1e-9 * (1.0 + shift[k] / c.std), "{}", c.name);
    }
}

#[test]
fn test_split_needs_train_statistics() {
    let dir = fleet_files(6);
    let test = parse_cmapss(dir.path().join("test_T.txt"), Split::Test).unwrap();
    assert!(matches!(normalize(&test, None), Err(Error::InvalidArgument(_))));
}

#[test]
fn normalized_cache_has_retained_header() {
    let dir = fleet_files(7);
    let train = parse_cmapss(dir.path().join("train_T.txt"), Split::Train).unwrap();
    let (norm, _) = normalize(&train, None).unwrap();
    let path = dir.path().join("cache.csv");
    write_normalized_csv(&norm, &path).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..2], ["unit_id", "cycle"]);
    assert_eq!(header.len(), 2 + norm.channels.settings.len() + norm.channels.sensors.len());
    assert_eq!(r.records().count(), norm.n_rows());
}

#[test]
fn rul_targets_are_capped_countdowns() {
    let dir = fleet_files(8);
    let train = parse_cmapss(dir.path().join("train_T.txt"), Split::Train).unwrap();
    let t = build_rul_targets(&train, DEFAULT_RUL_CAP).unwrap();
    for (id, recs) in &train.units {
        let v = t.unit(*id).unwrap();
        assert_eq!(*v.last().unwrap(), 0.0);
        for w in v.windows(2) {
            assert!(w[0] <= DEFAULT_RUL_CAP && (w[0] == w[1] + 1.0 || w[0] == DEFAULT_RUL_CAP));
        }
        assert_eq!(v.len(), recs.len());
    }
}

#[test]
fn noise_free_identity_holds_initial_state() {
    let spec = LinearGaussianSpec {
        n_z: 2,
        n_x: 2,
        a: vec![1.0, 0.0, 0.0, 1.0],
        c: vec![1.0, 0.0, 0.0, 1.0],
        q: vec![1e-12; 2],
        r: vec![1e-12; 2],
        init_mean: vec![0.3, -0.2],
        init_cov: vec![1.0, 0.0, 0.0, 1.0],
    };
    let (zs, seq) = gen_linear_gaussian_with_states(&spec, 40, 11).unwrap();
    for x in &seq.x {
        for k in 0..2 {
            assert!((x[k] - zs[0][k]).abs() < 1e-4);
        }
    }
    assert_eq!(seq, gen_linear_gaussian(&spec, 40, 11).unwrap());
}

#[test]
fn second_step_covariance_matches_propagation() {
    let spec = LinearGaussianSpec::random(&mut Rng::stream(12, 0), 2, 3);
    let n = 100_000;
    let samples: Vec<DVector<f64>> =
        (0..n).map(|s| DVector::from_column_slice(&gen_linear_gaussian(&spec, 2, s).unwrap().x[1])).collect();
    let mean = samples.iter().fold(DVector::zeros(3), |a, x| a + x) / n as f64;
    let cov = samples.iter().fold(DMatrix::zeros(3, 3), |a, x| a + (x - &mean) * (x - &mean).transpose()) / (n - 1) as f64;

    let (a, c) = (spec.a(), spec.c());
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.q));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.r));
    let want = &c * (&a * spec.init_cov() * a.transpose() + q) * c.transpose() + r;
    // Relative error measured against the diagonal scale, so small
    // off-diagonal entries do not blow up the ratio.
    for i in 0..3 {
        for j in 0..3 {
            let scale = (want[(i, i)] * want[(j, j)]).sqrt();
            assert!((cov[(i, j)] - want[(i, j)]).abs() < 0.05 * scale, "({i},{j}) {} vs {}", cov[(i, j)], want[(i, j)]);
        }
    }
}

fn record(unit: u32, cycle: u32, v: &[f64]) -> TrajectoryRecord {
    TrajectoryRecord { unit_id: unit, cycle, op_settings: v[..3].to_vec(), sensors: v[3..].to_vec() }
}

fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(prop::collection::vec(prop::collection::vec(-1e4..1e4f64, 24), 1..6), 1..4).prop_map(|units| {
        let map: BTreeMap<u32, Vec<TrajectoryRecord>> = units
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                let id = i as u32 + 1;
                (id, rows.iter().enumerate().map(|(c, v)| record(id, c as u32 + 1, v)).collect())
            })
            .collect();
        Dataset::new(Split::Train, Channels::raw(), map).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_serialize_round_trip(ds in dataset()) {
        let text = serialize_cmapss(&ds);
        let back = parse_cmapss_str(&text, Split::Train).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(serialize_cmapss(&back), text);
    }

    #[test]
    fn kalman_invariant_to_channel_order(seed in 0u64..1000, n_z in 1usize..4, n_x in 2usize..5, steps in 1usize..20) {
        let spec = LinearGaussianSpec::random(&mut Rng::stream(seed, 1), n_z, n_x);
        let seq = gen_linear_gaussian(&spec, steps, seed).unwrap();
        let mut perm: Vec<usize> = (0..n_x).collect();
        Rng::stream(seed, 2).shuffle(&mut perm);
        let mut p = spec.clone();
        p.c = perm.iter().flat_map(|&i| spec.c[i * n_z..(i + 1) * n_z].to_vec()).collect();
        p.r = perm.iter().map(|&i| spec.r[i]).collect();
        let xs = seq.x.iter().map(|x| perm.iter().map(|&i| x[i]).collect()).collect();
        let permuted = Sequence::observations(xs).unwrap();
        let (a, b) = (kalman_loglik(&spec, &seq).unwrap(), kalman_loglik(&p, &permuted).unwrap());
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}
