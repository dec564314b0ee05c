#![allow(dead_code)]

use avfp_core::data::surrogate::{self, SurrogateConfig};
use avfp_core::data::{gen_linear_gaussian, normalize, LinearGaussianSpec};
use avfp_core::training::{TrainConfig, TrainingData};
use avfp_core::{NetworkSpec, Rng};

/// Small normalized surrogate fleet with validation and test units.
pub fn small_fleet(seed: u64) -> (TrainingData, NetworkSpec) {
    let cfg = SurrogateConfig { units: 12, test_units: 4, min_life: 20, max_life: 36 };
    let (train, test, truth) = surrogate::generate(&cfg, seed);
    let (train, stats) = normalize(&train, None).unwrap();
    let (test, _) = normalize(&test, Some(&stats)).unwrap();
    let data = TrainingData::from_datasets(&train, Some((&test, &truth)), 125.0, 0.2).unwrap();
    let spec = NetworkSpec::sized(stats.sensors.len(), stats.settings.len(), 2, 6, 6);
    (data, spec)
}

pub fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, epochs: 2, trajectories_per_batch: 4, eval_every: 2, ..TrainConfig::default() }
}

/// Unlabelled sequences from one fixed linear-Gaussian model.
pub fn linear_gaussian_fleet(n: usize, steps: usize, seed: u64) -> (LinearGaussianSpec, Vec<avfp_core::data::Sequence>) {
    let spec = LinearGaussianSpec::random(&mut Rng::stream(seed, 7), 2, 3);
    let seqs = (0..n as u64).map(|i| gen_linear_gaussian(&spec, steps, seed * 1000 + i).unwrap()).collect();
    (spec, seqs)
}

/// Unit and row counts of a C-MAPSS text file by plain line and field
/// splitting, without the crate's parser.
pub fn scan_counts(path: &std::path::Path) -> (usize, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut units = std::collections::BTreeSet::new();
    let mut rows = 0;
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        assert_eq!(f.len(), 26, "{}", path.display());
        units.insert(f[0].to_string());
        rows += 1;
    }
    (units.len(), rows)
}

/// One RUL value per non-blank line.
pub fn scan_rul(path: &std::path::Path) -> Vec<f64> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().parse().unwrap()).collect()
}
