//! Synthetic run-to-failure fleet in the C-MAPSS file layout.
//!
//! Each unit degrades along `exp(rate * (t / life - 1))`, which stays flat
//! for most of the life and rises sharply near failure. Fourteen sensors
//! respond linearly to that wear with channel-specific gain and noise, six
//! sensors and the third operating setting are constant, mirroring the
//! single-condition FD001 subset. It exists for tests, benchmarks and demos
//! when the real files are not available; it is not a substitute for them.

use std::collections::BTreeMap;
use std::path::Path;

use super::{write_cmapss, Channels, Dataset, Split, TrajectoryRecord};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct SurrogateConfig {
    pub units: usize,
    pub test_units: usize,
    pub min_life: usize,
    pub max_life: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { units: 100, test_units: 100, min_life: 128, max_life: 362 }
    }
}

/// `(base, noise std, wear gain)` per sensor; zero noise and gain means constant.
const SENSOR_MODEL: [(f64, f64, f64); 21] = [
    (518.67, 0.0, 0.0),
    (642.68, 0.45, 1.6),
    (1590.5, 5.5, 22.0),
    (1408.9, 8.0, 35.0),
    (14.62, 0.0, 0.0),
    (21.61, 0.0014, 0.0),
    (553.37, 0.8, -3.5),
    (2388.09, 0.06, 0.25),
    (9065.2, 20.0, 45.0),
    (1.3, 0.0, 0.0),
    (47.54, 0.24, 1.4),
    (521.41, 0.65, -3.2),
    (2388.09, 0.06, 0.25),
    (8143.75, 17.0, 32.0),
    (8.442, 0.033, 0.14),
    (0.03, 0.0, 0.0),
    (393.2, 1.4, 5.5),
    (2388.0, 0.0, 0.0),
    (100.0, 0.0, 0.0),
    (38.82, 0.16, -0.8),
    (23.29, 0.1, -0.45),
];

fn unit_records(rng: &mut Rng, unit_id: u32, life: usize, observed: usize) -> Vec<TrajectoryRecord> {
    let rate = rng.uniform_range(3.0, 6.0);
    let offset = rng.uniform_range(0.0, 0.05);
    (1..=observed)
        .map(|cycle| {
            let wear = offset + (rate * (cycle as f64 / life as f64 - 1.0)).exp();
            let op_settings = vec![0.0022 * rng.normal(), 0.0003 * rng.normal(), 100.0];
            let sensors = SENSOR_MODEL
                .iter()
                .map(|&(base, noise, gain)| if noise == 0.0 { base } else { base + gain * wear + noise * rng.normal() })
                .collect();
            TrajectoryRecord { unit_id, cycle: cycle as u32, op_settings, sensors }
        })
        .collect()
}

const MIN_TEST_RUL: usize = 7;
const MAX_TEST_RUL: usize = 145;

/// Training fleet, truncated test fleet, and the test ground truth.
pub fn generate(cfg: &SurrogateConfig, seed: u64) -> (Dataset, Dataset, BTreeMap<u32, f64>) {
    let mut rng = Rng::stream(seed, 0x5355_5252);
    let life = |rng: &mut Rng| cfg.min_life + rng.below(cfg.max_life - cfg.min_life + 1);
    let mut train = BTreeMap::new();
    for u in 1..=cfg.units as u32 {
        let l = life(&mut rng);
        train.insert(u, unit_records(&mut rng, u, l, l));
    }
    let mut test = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for u in 1..=cfg.test_units as u32 {
        let l = life(&mut rng);
        // Remaining life spread like the FD001 ground truth (7 to 145
        // cycles), never leaving fewer than a fifth of the life observed.
        let max_rul = (l - l / 5).min(MAX_TEST_RUL).max(MIN_TEST_RUL);
        let rul = MIN_TEST_RUL + rng.below(max_rul - MIN_TEST_RUL + 1);
        let observed = (l - rul).max(1);
        test.insert(u, unit_records(&mut rng, u, l, observed));
        truth.insert(u, (l - observed) as f64);
    }
    (
        Dataset::new(Split::Train, Channels::raw(), train).expect("well-formed"),
        Dataset::new(Split::Test, Channels::raw(), test).expect("well-formed"),
        truth,
    )
}

/// Writes `train_<tag>.txt`, `test_<tag>.txt` and `RUL_<tag>.txt` into `dir`.
pub fn write_files(dir: impl AsRef<Path>, cfg: &SurrogateConfig, seed: u64, tag: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (train, test, truth) = generate(cfg, seed);
    write_cmapss(&train, dir.join(format!("train_{tag}.txt")))?;
    write_cmapss(&test, dir.join(format!("test_{tag}.txt")))?;
    let rul: String = truth.values().map(|v| format!("{v}\n")).collect();
    std::fs::write(dir.join(format!("RUL_{tag}.txt")), rul)?;
    Ok(())
}
