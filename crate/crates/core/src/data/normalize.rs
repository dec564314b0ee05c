use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Channels, Dataset, Split, TrajectoryRecord};
use crate::error::{Error, Result};

/// Channels whose training standard deviation falls below this are dropped.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Raw channel layout the statistics were fitted on.
    pub raw_channels: Channels,
    /// Retained settings, in output order.
    pub settings: Vec<ChannelStats>,
    /// Retained sensors, in output order.
    pub sensors: Vec<ChannelStats>,
    pub dropped: Vec<String>,
    pub cap: f64,
}

impl NormalizationStats {
    pub fn output_channels(&self) -> Channels {
        Channels {
            settings: self.settings.iter().map(|c| c.name.clone()).collect(),
            sensors: self.sensors.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fit(names: &[String], column: impl Fn(&TrajectoryRecord) -> &[f64], ds: &Dataset) -> (Vec<ChannelStats>, Vec<String>) {
    let n = ds.n_rows() as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let vals = || ds.units.values().flatten().map(|r| column(r)[k]);
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < MIN_STD {
            dropped.push(name.clone());
        } else {
            kept.push(ChannelStats { name: name.clone(), mean, std });
        }
    }
    (kept, dropped)
}

fn apply(stats: &[ChannelStats], names: &[String], vals: &[f64]) -> Vec<f64> {
    stats
        .iter()
        .map(|c| {
            let k = names.iter().position(|n| *n == c.name).expect("validated");
            (vals[k] - c.mean) / c.std
        })
        .collect()
}

/// Z-scores every retained channel.
///
/// Without `stats` the statistics are fitted on `ds`, which must then be a
/// training split; test splits must be normalized with the training
/// statistics. Channels with (near-)zero training variance are removed.
pub fn normalize(ds: &Dataset, stats: Option<&NormalizationStats>) -> Result<(Dataset, NormalizationStats)> {
    let stats = match stats {
        Some(s) => {
            if s.raw_channels != ds.channels {
                return Err(Error::SpecMismatch(format!(
                    "statistics were fitted on channels {:?} / {:?}, dataset has {:?} / {:?}",
                    s.raw_channels.settings, s.raw_channels.sensors, ds.channels.settings, ds.channels.sensors
                )));
            }
            s.clone()
        }
        None => {
            if ds.split == Split::Test {
                return Err(Error::InvalidArgument(
                    "test splits must be normalized with statistics from the training split".into(),
                ));
            }
            if ds.n_rows() == 0 {
                return Err(Error::Data("cannot fit statistics on an empty dataset".into()));
            }
            let (settings, mut dropped) = fit(&ds.channels.settings, |r| &r.op_settings, ds);
            let (sensors, d2) = fit(&ds.channels.sensors, |r| &r.sensors, ds);
            dropped.extend(d2);
            if sensors.is_empty() {
                return Err(Error::Data("every sensor channel is constant".into()));
            }
            NormalizationStats {
                raw_channels: ds.channels.clone(),
                settings,
                sensors,
                dropped,
                cap: super::DEFAULT_RUL_CAP,
            }
        }
    };
    let units: BTreeMap<u32, Vec<TrajectoryRecord>> = ds
        .units
        .iter()
        .map(|(&id, recs)| {
            let recs = recs
                .iter()
                .map(|r| TrajectoryRecord {
                    unit_id: r.unit_id,
                    cycle: r.cycle,
                    op_settings: apply(&stats.settings, &ds.channels.settings, &r.op_settings),
                    sensors: apply(&stats.sensors, &ds.channels.sensors, &r.sensors),
                })
                .collect();
            (id, recs)
        })
        .collect();
    let out = Dataset::new(ds.split, stats.output_channels(), units)?;
    Ok((out, stats))
}

/// Normalized dataset cache: header `unit_id,cycle,<retained channels>`.
pub fn write_normalized_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit_id".to_string(), "cycle".to_string()];
    header.extend(ds.channels.settings.iter().cloned());
    header.extend(ds.channels.sensors.iter().cloned());
    w.write_record(&header)?;
    for recs in ds.units.values() {
        for r in recs {
            let mut row = vec![r.unit_id.to_string(), r.cycle.to_string()];
            row.extend(r.op_settings.iter().chain(&r.sensors).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::surrogate;

    fn column_moments(ds: &Dataset, k: usize) -> (f64, f64) {
        let vals: Vec<f64> = ds.units.values().flatten().map(|r| r.sensors[k]).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        (m, (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn constant_channels_are_dropped_and_rest_standardized() {
        let (train, _, _) = surrogate::generate(&surrogate::SurrogateConfig { units: 6, ..Default::default() }, 3);
        let (norm, stats) = normalize(&train, None).unwrap();
        for name in ["s1", "s5", "s10", "s16", "s18", "s19", "setting3"] {
            assert!(stats.dropped.iter().any(|d| d == name), "{name} not dropped");
            assert!(!norm.channels.sensors.contains(&name.to_string()));
        }
        for k in 0..norm.channels.sensors.len() {
            let (m, s) = column_moments(&norm, k);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "channel {k}: {m} {s}");
        }
    }

    #[test]
    fn shifted_copy_maps_to_shift_over_std() {
        let (train, _, _) = surrogate::generate(&surrogate::SurrogateConfig { units: 4, ..Default::default() }, 5);
        let (_, stats) = normalize(&train, None).unwrap();
        let shift = 3.5;
        let mut shifted = train.clone();
        shifted.split = Split::Test;
        for r in shifted.units.values_mut().flatten() {
            r.sensors.iter_mut().for_each(|v| *v += shift);
        }
        let (norm, _) = normalize(&shifted, Some(&stats)).unwrap();
        for (k, c) in stats.sensors.iter().enumerate() {
            let (m, _) = column_moments(&norm, k);
            assert!((m - shift / c.std).abs() < 1e-8 * (1.0 + shift / c.std), "{}: {m}", c.name);
        }
    }

    #[test]
    fn test_split_requires_training_stats() {
        let (_, test, _) = surrogate::generate(&surrogate::SurrogateConfig { units: 3, ..Default::default() }, 1);
        assert!(matches!(normalize(&test, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (train, _, _) = surrogate::generate(&surrogate::SurrogateConfig { units: 3, ..Default::default() }, 1);
        let (norm, stats) = normalize(&train, None).unwrap();
        assert!(matches!(normalize(&norm, Some(&stats)), Err(Error::SpecMismatch(_))));
    }
}
