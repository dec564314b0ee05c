//! Run-to-failure data: C-MAPSS ingestion, normalization and RUL targets,
//! plus the linear-Gaussian generator and Kalman likelihood used as an
//! exact reference for the variational bound.

mod cmapss;
mod linear_gaussian;
mod normalize;
mod rul;
pub mod surrogate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cmapss::{load_test_rul, parse_cmapss, parse_cmapss_str, serialize_cmapss, write_cmapss, SENSORS, SETTINGS};
pub use linear_gaussian::{gen_linear_gaussian, gen_linear_gaussian_with_states, kalman_loglik, LinearGaussianSpec};
pub use normalize::{normalize, write_normalized_csv, ChannelStats, NormalizationStats};
pub use rul::{build_rul_targets, RulTargets, DEFAULT_RUL_CAP};

use crate::error::{Error, Result};

/// One engine cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub unit_id: u32,
    pub cycle: u32,
    /// Operating settings `u_t`.
    pub op_settings: Vec<f64>,
    /// Sensor readings `x_t`.
    pub sensors: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Units observed until failure.
    Train,
    /// Units truncated at an unknown point before failure.
    Test,
}

/// Channel names, in record order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub settings: Vec<String>,
    pub sensors: Vec<String>,
}

impl Channels {
    pub fn raw() -> Self {
        Self {
            settings: (1..=SETTINGS).map(|i| format!("setting{i}")).collect(),
            sensors: (1..=SENSORS).map(|i| format!("s{i}")).collect(),
        }
    }
}

/// Complete unit trajectories keyed by unit id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub channels: Channels,
    pub units: BTreeMap<u32, Vec<TrajectoryRecord>>,
}

impl Dataset {
    pub fn new(split: Split, channels: Channels, units: BTreeMap<u32, Vec<TrajectoryRecord>>) -> Result<Self> {
        for (id, recs) in &units {
            if recs.is_empty() {
                return Err(Error::Data(format!("unit {id} has no records")));
            }
            for (i, r) in recs.iter().enumerate() {
                if r.unit_id != *id || r.cycle as usize != i + 1 {
                    return Err(Error::Data(format!("unit {id}: record {i} has unit {} cycle {}", r.unit_id, r.cycle)));
                }
                if r.op_settings.len() != channels.settings.len() || r.sensors.len() != channels.sensors.len() {
                    return Err(Error::Data(format!("unit {id} cycle {}: channel count mismatch", r.cycle)));
                }
            }
        }
        Ok(Self { split, channels, units })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_rows(&self) -> usize {
        self.units.values().map(Vec::len).sum()
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.units.keys().copied()
    }

    pub fn sequence(&self, unit: u32) -> Option<Sequence> {
        self.units.get(&unit).map(|recs| Sequence::from_records(recs))
    }

    pub fn sequences(&self) -> Vec<(u32, Sequence)> {
        self.units.iter().map(|(&id, recs)| (id, Sequence::from_records(recs))).collect()
    }

    /// Holds out the last `fraction` of units (by id order), at least one
    /// when there are two or more units. Returns `(kept, held_out)`.
    pub fn split_validation(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.units.len();
        let mut n_val = (n as f64 * fraction).round() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        let cut = n - n_val;
        let mut keep = BTreeMap::new();
        let mut held = BTreeMap::new();
        for (i, (id, recs)) in self.units.iter().enumerate() {
            if i < cut {
                keep.insert(*id, recs.clone());
            } else {
                held.insert(*id, recs.clone());
            }
        }
        let mk = |units| Dataset { split: self.split, channels: self.channels.clone(), units };
        (mk(keep), mk(held))
    }

    /// Test-split dataset holding the first `n` cycles of each listed unit.
    pub fn truncated(&self, cuts: &[(u32, usize)]) -> Result<Dataset> {
        let mut units = BTreeMap::new();
        for &(id, n) in cuts {
            let recs = self.units.get(&id).ok_or_else(|| Error::Data(format!("no unit {id}")))?;
            if n == 0 || n > recs.len() {
                return Err(Error::Data(format!("cannot cut unit {id} of length {} at {n}", recs.len())));
            }
            units.insert(id, recs[..n].to_vec());
        }
        Dataset::new(Split::Test, self.channels.clone(), units)
    }
}

/// Model-ready view of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub x: Vec<Vec<f64>>,
    /// Empty inner vectors when the sequence has no inputs.
    pub u: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn new(x: Vec<Vec<f64>>, u: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != u.len() {
            return Err(Error::shape("sequence", format!("{} observations vs {} inputs", x.len(), u.len())));
        }
        let (nx, nu) = (x.first().map_or(0, Vec::len), u.first().map_or(0, Vec::len));
        if x.iter().any(|v| v.len() != nx) || u.iter().any(|v| v.len() != nu) {
            return Err(Error::shape("sequence", "ragged rows"));
        }
        if x.iter().chain(&u).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence"));
        }
        Ok(Self { x, u })
    }

    /// Observation-only sequence.
    pub fn observations(x: Vec<Vec<f64>>) -> Result<Self> {
        let u = vec![Vec::new(); x.len()];
        Self::new(x, u)
    }

    pub fn from_records(recs: &[TrajectoryRecord]) -> Self {
        Self {
            x: recs.iter().map(|r| r.sensors.clone()).collect(),
            u: recs.iter().map(|r| r.op_settings.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn u_dim(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    pub fn prefix(&self, n: usize) -> Sequence {
        Sequence { x: self.x[..n].to_vec(), u: self.u[..n].to_vec() }
    }
}
