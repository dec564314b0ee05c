//! RUL readout, scoring, and the repeated-runs experiment harness.

mod experiment;
mod health;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sequence, Split};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelParams};
use crate::objectives::filter_means;

pub use experiment::{emit_plot_data, run_experiment, run_experiment_with_seeds, RunRecord, RunSummary};
pub use health::HealthIndexModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Learned RUL head at the final history state.
    Supervised,
    /// Label-free health index matched against training trajectories.
    HealthIndex,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "health_index" | "health-index" => Ok(Self::HealthIndex),
            _ => Err(Error::InvalidArgument(format!("unknown prediction mode {s:?}"))),
        }
    }
}

/// A trajectory scored at one or more prefix lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalUnit {
    pub id: u32,
    pub seq: Sequence,
    /// `(prefix length, true RUL after that prefix)`.
    pub cuts: Vec<(usize, f64)>,
}

impl EvalUnit {
    /// Test protocol: one evaluation at the last observed cycle.
    pub fn at_end(id: u32, seq: Sequence, truth: f64) -> Self {
        let n = seq.len();
        Self { id, seq, cuts: vec![(n, truth)] }
    }

    /// Run-to-failure unit cut at fixed fractions of its life; the true RUL
    /// is the uncapped number of remaining cycles.
    pub fn validation(id: u32, seq: Sequence, fractions: &[f64]) -> Self {
        let n = seq.len();
        let mut cuts: Vec<(usize, f64)> = fractions
            .iter()
            .map(|f| ((n as f64 * f).round() as usize).clamp(1, n))
            .map(|len| (len, (n - len) as f64))
            .collect();
        cuts.dedup_by_key(|c| c.0);
        Self { id, seq, cuts }
    }
}

/// Per-unit `(predicted, true)` RUL at the last observed cycle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub entries: BTreeMap<u32, (f64, f64)>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with header `unit_id,predicted_rul,true_rul`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit_id,predicted_rul,true_rul\n");
        for (id, (p, t)) in &self.entries {
            out.push_str(&format!("{id},{p},{t}\n"));
        }
        out
    }
}

pub fn rmse(p: &PredictionSet) -> Result<f64> {
    rmse_pairs(p.entries.values().copied())
}

pub fn rmse_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in pairs {
        sum += (p - t) * (p - t);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("RMSE of an empty prediction set".into()));
    }
    Ok((sum / n as f64).sqrt())
}

fn check_dims(params: &ModelParams, seq: &Sequence) -> Result<()> {
    let s = params.spec();
    if seq.is_empty() {
        return Err(Error::Data("empty unit".into()));
    }
    if seq.x_dim() != s.n_x || seq.u_dim() != s.n_u {
        return Err(Error::SpecMismatch(format!(
            "data has {} sensors and {} settings, model expects {} and {}",
            seq.x_dim(),
            seq.u_dim(),
            s.n_x,
            s.n_u
        )));
    }
    Ok(())
}

/// Supervised RUL after each prefix length in `lens`, from one
/// deterministic mean-fed pass.
pub fn supervised_rul(params: &ModelParams, seq: &Sequence, lens: &[usize]) -> Result<Vec<f64>> {
    check_dims(params, seq)?;
    let tape = Tape::new();
    let model = BoundModel::new(&tape, params, &[]);
    let states = filter_means(&model, seq)?;
    lens.iter()
        .map(|&n| {
            if n == 0 || n > seq.len() {
                return Err(Error::InvalidArgument(format!("cut {n} outside a unit of length {}", seq.len())));
            }
            let (h, mean) = &states[n - 1];
            Ok(model.rul_head(h, *mean)?.item())
        })
        .collect()
}

/// Latent means `E[z_t]` of the deterministic filtering pass.
pub fn latent_means(params: &ModelParams, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
    check_dims(params, seq)?;
    let tape = Tape::new();
    let model = BoundModel::new(&tape, params, &[]);
    Ok(filter_means(&model, seq)?.into_iter().map(|(_, m)| m.value().data().to_vec()).collect())
}

/// Flattened `(unit, predicted, true)` for every cut of every unit.
pub fn predict_cuts(
    params: &ModelParams,
    units: &[EvalUnit],
    mode: PredictionMode,
    health: Option<&HealthIndexModel>,
) -> Result<Vec<(u32, f64, f64)>> {
    let mut out = Vec::new();
    for unit in units {
        let lens: Vec<usize> = unit.cuts.iter().map(|c| c.0).collect();
        let preds = match mode {
            PredictionMode::Supervised => supervised_rul(params, &unit.seq, &lens)?,
            PredictionMode::HealthIndex => {
                let hi = health.ok_or_else(|| Error::InvalidArgument("health-index mode needs a fitted index".into()))?;
                let curve = hi.curve(params, &unit.seq)?;
                lens.iter().map(|&n| hi.match_rul(&curve[..n])).collect()
            }
        };
        out.extend(preds.into_iter().zip(&unit.cuts).map(|(p, c)| (unit.id, p, c.1)));
    }
    Ok(out)
}

/// Predictions at each test unit's last observed cycle.
///
/// `train` is only consulted in health-index mode, where the index and the
/// reference curves are fitted on it. Both datasets must already be
/// normalized with the same statistics.
pub fn predict_rul(
    params: &ModelParams,
    test: &Dataset,
    truth: &BTreeMap<u32, f64>,
    mode: PredictionMode,
    train: Option<&Dataset>,
    cap: f64,
) -> Result<PredictionSet> {
    if test.split != Split::Test {
        return Err(Error::InvalidArgument("predictions are made on a test split".into()));
    }
    let health = match mode {
        PredictionMode::Supervised => None,
        PredictionMode::HealthIndex => {
            let train = train.ok_or_else(|| Error::InvalidArgument("health-index mode needs the training split".into()))?;
            Some(HealthIndexModel::fit(params, &train.sequences(), cap)?)
        }
    };
    let mut entries = BTreeMap::new();
    for (id, seq) in test.sequences() {
        let t = *truth.get(&id).ok_or_else(|| Error::Data(format!("no ground truth for test unit {id}")))?;
        let unit = EvalUnit::at_end(id, seq, t);
        let (_, p, t) = predict_cuts(params, std::slice::from_ref(&unit), mode, health.as_ref())?[0];
        entries.insert(id, (p, t));
    }
    Ok(PredictionSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(f64, f64)]) -> PredictionSet {
        PredictionSet { entries: pairs.iter().enumerate().map(|(i, &p)| (i as u32 + 1, p)).collect() }
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&set(&[(3.0, 3.0), (7.5, 7.5)])).unwrap(), 0.0);
        assert!((rmse(&set(&[(12.0, 2.0), (40.0, 30.0), (10.0, 0.0)])).unwrap() - 10.0).abs() < 1e-12);
        assert!((rmse(&set(&[(5.0, 0.0), (0.0, 5.0)])).unwrap() - 5.0).abs() < 1e-12);
        assert!(rmse(&PredictionSet::default()).is_err());
    }

    #[test]
    fn validation_cuts_are_distinct_and_in_range() {
        let seq = Sequence::observations((0..7).map(|i| vec![i as f64]).collect()).unwrap();
        let u = EvalUnit::validation(4, seq, &[0.0, 0.05, 0.5, 1.0]);
        assert_eq!(u.cuts, vec![(1, 6.0), (4, 3.0), (7, 0.0)]);
    }

    #[test]
    fn mode_names() {
        assert_eq!("supervised".parse::<PredictionMode>().unwrap(), PredictionMode::Supervised);
        assert_eq!("health_index".parse::<PredictionMode>().unwrap(), PredictionMode::HealthIndex);
        assert!("oracle".parse::<PredictionMode>().is_err());
    }
}
