use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Channels, Dataset, Split, TrajectoryRecord};
use crate::error::{Error, Result};

pub const SETTINGS: usize = 3;
pub const SENSORS: usize = 21;
const FIELDS: usize = 2 + SETTINGS + SENSORS;

/// Reads a C-MAPSS trajectory file (`train_FD00x.txt` / `test_FD00x.txt`).
pub fn parse_cmapss(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_text(&text, path, split)
}

pub fn parse_cmapss_str(text: &str, split: Split) -> Result<Dataset> {
    parse_text(text, Path::new("<memory>"), split)
}

fn parse_text(text: &str, path: &Path, split: Split) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut units: BTreeMap<u32, Vec<TrajectoryRecord>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != FIELDS {
            return Err(err(line, format!("expected {FIELDS} fields, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| -> Result<u32> {
            let v: f64 = s.parse().map_err(|_| err(line, format!("{what} {s:?} is not numeric")))?;
            if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(err(line, format!("{what} {s:?} is not a positive integer")));
            }
            Ok(v as u32)
        };
        let unit_id = int(fields[0], "unit")?;
        let cycle = int(fields[1], "cycle")?;
        let mut vals = Vec::with_capacity(FIELDS - 2);
        for s in &fields[2..] {
            let v: f64 = s.parse().map_err(|_| err(line, format!("field {s:?} is not numeric")))?;
            if !v.is_finite() {
                return Err(err(line, format!("field {s:?} is not finite")));
            }
            vals.push(v);
        }
        let recs = units.entry(unit_id).or_default();
        let expected = recs.len() as u32 + 1;
        if cycle != expected {
            return Err(err(line, format!("unit {unit_id}: cycle {cycle} where {expected} was expected")));
        }
        recs.push(TrajectoryRecord {
            unit_id,
            cycle,
            op_settings: vals[..SETTINGS].to_vec(),
            sensors: vals[SETTINGS..].to_vec(),
        });
    }
    Dataset::new(split, Channels::raw(), units)
}

/// Writes a raw dataset back in the whitespace-separated C-MAPSS layout.
/// Values use the shortest representation that parses back exactly.
pub fn serialize_cmapss(ds: &Dataset) -> String {
    let mut out = String::new();
    for recs in ds.units.values() {
        for r in recs {
            let _ = write!(out, "{} {}", r.unit_id, r.cycle);
            for v in r.op_settings.iter().chain(&r.sensors) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_cmapss(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serialize_cmapss(ds))?;
    Ok(())
}

/// Reads `RUL_FD00x.txt`: line `i` is the true remaining life of test unit `i`
/// at its last observed cycle.
pub fn load_test_rul(path: impl AsRef<Path>, test: &Dataset) -> Result<BTreeMap<u32, f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let v: i64 = s.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("{s:?} is not an integer"),
        })?;
        if v < 0 {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("negative RUL {v}") });
        }
        out.insert(out.len() as u32 + 1, v as f64);
    }
    if out.len() != test.n_units() {
        return Err(Error::Data(format!(
            "{} lists {} units but the test set has {}",
            path.display(),
            out.len(),
            test.n_units()
        )));
    }
    if let Some(id) = test.unit_ids().find(|id| !out.contains_key(id)) {
        return Err(Error::Data(format!("no ground truth for test unit {id}")));
    }
    Ok(out)
}
