use std::collections::BTreeMap;

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Early-life RUL plateau, in cycles.
pub const DEFAULT_RUL_CAP: f64 = 125.0;

/// Piecewise-linear RUL targets for every cycle of every training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RulTargets {
    pub cap: f64,
    /// `targets[unit][cycle - 1]`.
    pub targets: BTreeMap<u32, Vec<f64>>,
}

impl RulTargets {
    pub fn get(&self, unit: u32, cycle: u32) -> Option<f64> {
        self.targets.get(&unit)?.get(cycle.checked_sub(1)? as usize).copied()
    }

    pub fn unit(&self, unit: u32) -> Option<&[f64]> {
        self.targets.get(&unit).map(Vec::as_slice)
    }
}

/// `min(T_u - cycle, cap)` where `T_u` is the last cycle of unit `u`.
pub fn build_rul_targets(ds: &Dataset, cap: f64) -> Result<RulTargets> {
    if ds.split != Split::Train {
        return Err(Error::InvalidArgument(
            "RUL targets need run-to-failure units; test units stop before failure".into(),
        ));
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidArgument(format!("cap must be positive, got {cap}")));
    }
    let targets = ds
        .units
        .iter()
        .map(|(&id, recs)| {
            let last = recs.len() as f64;
            (id, recs.iter().map(|r| (last - r.cycle as f64).min(cap)).collect())
        })
        .collect();
    Ok(RulTargets { cap, targets })
}
