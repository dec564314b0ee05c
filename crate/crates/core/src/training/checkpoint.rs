//! Binary checkpoint file.
//!
//! ```text
//! "AVFP" | u32 version | payload | u64 FNV-1a of payload
//! payload = u64 metadata length | metadata (JSON)
//!         | u32 array count | { u32 name length | name | u32 rank | u64 dims[rank] | f64 data[..] }*
//! ```
//!
//! All integers and floats are little-endian. The metadata block carries
//! the non-array fields (network sizes, configuration, generator state,
//! counters, metric trace); every float array is stored bit-exactly in the
//! table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{step_rng, EvalRecord, Provisional, TrainState, TrainTrace};
use super::{AdamConfig, Fnv64, OptimizerState, TrainConfig};
use crate::data::NormalizationStats;
use crate::diff::{ParamId, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelParams, NetworkSpec};
use crate::rng::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AVFP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub state: TrainState,
    /// Statistics the training data was normalized with.
    pub normalization: Option<NormalizationStats>,
}

impl Checkpoint {
    pub fn new(state: TrainState, normalization: Option<NormalizationStats>) -> Self {
        Self { version: CHECKPOINT_VERSION, state, normalization }
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.state.params.spec()
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    label: String,
    config: AdamConfig,
    t: u64,
    skipped: u64,
    params: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProvisionalMeta {
    step: u64,
    replaced: bool,
    prior_best: Option<EvalRecord>,
    prior_has_params: bool,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: NetworkSpec,
    config: TrainConfig,
    step: u64,
    rng: Rng,
    consecutive_nonfinite: u32,
    skipped_batches: u64,
    trace: TrainTrace,
    best: Option<EvalRecord>,
    has_best_params: bool,
    provisional: Option<ProvisionalMeta>,
    optimizers: Vec<OptimizerMeta>,
    normalization: Option<NormalizationStats>,
}

fn optimizers(state: &TrainState) -> Vec<(&'static str, &OptimizerState)> {
    let mut out = vec![("disc", &state.disc_opt), ("gen", &state.gen_opt)];
    if let Some(r) = &state.rul_opt {
        out.push(("rul", r));
    }
    out
}

fn put_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend((d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend(v.to_le_bytes());
    }
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let opts = optimizers(s);
    let meta = Metadata {
        spec: s.params.spec().clone(),
        config: s.config.clone(),
        step: s.step,
        rng: s.rng.clone(),
        consecutive_nonfinite: s.consecutive_nonfinite,
        skipped_batches: s.skipped_batches,
        trace: s.trace.clone(),
        best: s.best.clone(),
        has_best_params: s.best_params.is_some(),
        provisional: s.provisional.as_ref().map(|p| ProvisionalMeta {
            step: p.step,
            replaced: p.replaced.is_some(),
            prior_best: p.replaced.as_ref().and_then(|r| r.0.clone()),
            prior_has_params: p.replaced.as_ref().is_some_and(|r| r.1.is_some()),
        }),
        optimizers: opts
            .iter()
            .map(|(label, o)| OptimizerMeta {
                label: label.to_string(),
                config: o.config,
                t: o.t,
                skipped: o.skipped,
                params: o.param_ids().map(|id| s.params.name(id).to_string()).collect(),
            })
            .collect(),
        normalization: ckpt.normalization.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;

    let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for e in s.params.entries() {
        arrays.push((format!("param/{}", e.name), e.value.shape().to_vec(), e.value.data()));
    }
    if let Some(best) = &s.best_params {
        for e in best.entries() {
            arrays.push((format!("best/{}", e.name), e.value.shape().to_vec(), e.value.data()));
        }
    }
    if let Some((_, Some(prior))) = s.provisional.as_ref().and_then(|p| p.replaced.as_ref()) {
        for e in prior.entries() {
            arrays.push((format!("prior/{}", e.name), e.value.shape().to_vec(), e.value.data()));
        }
    }
    for (label, o) in &opts {
        for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
            for (id, vals) in moments.iter() {
                arrays.push((format!("{label}.{kind}/{}", s.params.name(*id)), vec![vals.len()], vals));
            }
        }
    }

    let mut payload = Vec::new();
    payload.extend((meta.len() as u64).to_le_bytes());
    payload.extend(&meta);
    payload.extend((arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in &arrays {
        put_array(&mut payload, name, shape, data);
    }
    let mut h = Fnv64::new();
    h.write(&payload);

    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend(MAGIC);
    out.extend(ckpt.version.to_le_bytes());
    out.extend(payload);
    out.extend(h.finish().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let (payload, tail) = bytes[8..].split_at(bytes.len() - 16);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let mut h = Fnv64::new();
    h.write(payload);
    if h.finish() != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let meta_len = r.len()?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let n_arrays = r.u32()?;
    let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_arrays {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("array {name} is too large")))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("array {name} is too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after the array table".into()));
    }

    let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing array {name}")));
    let load_params = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<ModelParams> {
        let mut p = ModelParams::zeros(&meta.spec)?;
        for id in p.ids().collect::<Vec<_>>() {
            let name = p.name(id).to_string();
            let t = take(&format!("{prefix}/{name}"))?;
            if t.shape() != p.get(id).shape() {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {:?}", t.shape(), p.get(id).shape())));
            }
            p.set(id, t.data())?;
        }
        Ok(p)
    };
    let params = load_params("param", &mut take)?;
    let best_params = if meta.has_best_params { Some(load_params("best", &mut take)?) } else { None };
    let provisional = match &meta.provisional {
        None => None,
        Some(p) => {
            let replaced = if p.replaced {
                let prior = if p.prior_has_params { Some(load_params("prior", &mut take)?) } else { None };
                Some((p.prior_best.clone(), prior))
            } else {
                None
            };
            Some(Provisional { step: p.step, replaced })
        }
    };

    let mut opts: BTreeMap<String, OptimizerState> = BTreeMap::new();
    for om in &meta.optimizers {
        let mut ids: Vec<(ParamId, usize)> = Vec::new();
        for name in &om.params {
            let id = params.id_of(name).ok_or_else(|| Error::Checkpoint(format!("optimizer refers to unknown {name}")))?;
            ids.push((id, params.get(id).len()));
        }
        let mut o = OptimizerState::new(om.config, ids.iter().copied());
        o.t = om.t;
        o.skipped = om.skipped;
        for (id, n) in ids {
            let name = params.name(id);
            for kind in ["m", "v"] {
                let t = take(&format!("{}.{kind}/{name}", om.label))?;
                if t.len() != n {
                    return Err(Error::Checkpoint(format!("{} moment {kind} of {name} has {} entries", om.label, t.len())));
                }
                let slot = if kind == "m" { o.m.get_mut(&id) } else { o.v.get_mut(&id) };
                slot.expect("created above").copy_from_slice(t.data());
            }
        }
        opts.insert(om.label.clone(), o);
    }
    drop(take);
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {extra}")));
    }
    let mut opt = |label: &str| opts.remove(label).ok_or_else(|| Error::Checkpoint(format!("missing {label} optimizer")));
    let disc_opt = opt("disc")?;
    let gen_opt = opt("gen")?;
    let rul_opt = opt("rul").ok();
    if meta.rng != step_rng(meta.config.seed, meta.step) {
        return Err(Error::Checkpoint(format!("generator state does not belong to step {}", meta.step)));
    }
    let state = TrainState {
        config: meta.config,
        params,
        disc_opt,
        gen_opt,
        rul_opt,
        rng: meta.rng,
        step: meta.step,
        consecutive_nonfinite: meta.consecutive_nonfinite,
        skipped_batches: meta.skipped_batches,
        trace: meta.trace,
        best: meta.best,
        best_params,
        provisional,
    };
    Ok(Checkpoint { version, state, normalization: meta.normalization })
}

/// Writes atomically: the file is assembled next to `path` and renamed.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and fully validates a checkpoint; nothing is returned unless the
/// whole file checks out.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
