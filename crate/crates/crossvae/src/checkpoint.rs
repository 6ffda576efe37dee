//! Checkpoint archives: named VTEN records.
//!
//! Each record is a u16 LE name length, the UTF-8 name and one VTEN record;
//! a u32 LE record count closes the archive. Parameters are stored under
//! their hierarchical names, Adam moments under `opt_g.m.<name>` (and `.v`,
//! `opt_d`), and two byte records hold JSON: `meta.config` (the model config)
//! and `meta.state` (step, RNG position, per-parameter Adam step counts).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crossvae_core::model::VideoVae;
use crossvae_core::params::ParamStore;
use crossvae_core::rng::RngState;
use crossvae_core::training::{Adam, AdamSlot, TrainState};
use crossvae_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Within};
use crate::vten::Record;

pub const CONFIG_RECORD: &str = "meta.config";
pub const STATE_RECORD: &str = "meta.state";
const FORMAT: u32 = 1;

pub fn encode_archive(records: &[(String, Record)]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for (name, rec) in records {
        let len = u16::try_from(name.len()).map_err(|_| format!("record name {name:?} is too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        rec.encode(&mut out).map_err(|e| format!("record {name}: {e}"))?;
    }
    let count = u32::try_from(records.len()).map_err(|_| "too many records".to_string())?;
    out.extend_from_slice(&count.to_le_bytes());
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> std::result::Result<Vec<(String, Record)>, String> {
    if bytes.len() < 4 {
        return Err("truncated archive".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let count = u32::from_le_bytes(tail.try_into().expect("4 bytes")) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeSet::new();
    let mut at = 0;
    while at < body.len() {
        if body.len() - at < 2 {
            return Err("truncated record name".into());
        }
        let len = u16::from_le_bytes([body[at], body[at + 1]]) as usize;
        at += 2;
        let name = body.get(at..at + len).ok_or("truncated record name")?;
        let name = std::str::from_utf8(name).map_err(|_| "record name is not UTF-8".to_string())?.to_string();
        at += len;
        let (rec, used) = Record::decode_prefix(&body[at..]).map_err(|e| format!("record {name}: {e}"))?;
        at += used;
        if !seen.insert(name.clone()) {
            return Err(format!("duplicate record {name}"));
        }
        records.push((name, rec));
    }
    if records.len() != count {
        return Err(format!("archive declares {count} records but holds {}", records.len()));
    }
    Ok(records)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_archive(path: &Path, records: &[(String, Record)]) -> Result<()> {
    let bytes = encode_archive(records).map_err(|m| Error::checkpoint(path, m))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Record)>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_archive(&bytes).map_err(|m| Error::checkpoint(path, m))
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    lr: f64,
    betas: [f64; 2],
    clip: f64,
    /// Adam step count per parameter name.
    steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    format: u32,
    step: u64,
    rng: RngState,
    config_hash: String,
    opt_g: OptMeta,
    opt_d: OptMeta,
}

fn opt_records(prefix: &str, opt: &Adam<f32>, store: &ParamStore<f32>, out: &mut Vec<(String, Record)>) -> OptMeta {
    let mut steps = BTreeMap::new();
    for (id, slot) in &opt.slots {
        let name = &store.info(*id).name;
        out.push((format!("{prefix}.m.{name}"), Record::from_tensor(&slot.m)));
        out.push((format!("{prefix}.v.{name}"), Record::from_tensor(&slot.v)));
        steps.insert(name.clone(), slot.t);
    }
    OptMeta { lr: opt.lr, betas: opt.betas, clip: opt.clip, steps }
}

/// Saves the model's config and the complete training state.
pub fn save(path: impl AsRef<Path>, model: &VideoVae, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    let mut records: Vec<(String, Record)> = state.params.iter().map(|(_, info, t)| (info.name.clone(), Record::from_tensor(t))).collect();
    let opt_g = opt_records("opt_g", &state.opt_g, &state.params, &mut records);
    let opt_d = opt_records("opt_d", &state.opt_d, &state.params, &mut records);
    let meta = StateMeta { format: FORMAT, step: state.step, rng: state.rng.clone(), config_hash: state.config_hash.clone(), opt_g, opt_d };
    let meta = serde_json::to_vec(&meta).map_err(|source| Error::Json { path: path.into(), source })?;
    records.push((CONFIG_RECORD.to_string(), Record::bytes(model.cfg.to_json().as_bytes())));
    records.push((STATE_RECORD.to_string(), Record::bytes(&meta)));
    write_archive(path, &records)
}

/// A model rebuilt from a checkpoint together with its training state.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub model: VideoVae,
    pub state: TrainState,
}

fn take_bytes(path: &Path, records: &mut BTreeMap<String, Record>, name: &str) -> Result<Vec<u8>> {
    let rec = records.remove(name).ok_or_else(|| Error::checkpoint(path, format!("missing record {name}")))?;
    rec.into_bytes().map_err(|e| Error::checkpoint(path, format!("record {name}: {e}")))
}

fn take_tensor(path: &Path, records: &mut BTreeMap<String, Record>, name: &str, shape: &[usize]) -> Result<crossvae_core::Tensor<f32>> {
    let rec = records.remove(name).ok_or_else(|| Error::checkpoint(path, format!("missing record {name}")))?;
    let t = rec.into_tensor().map_err(|e| Error::checkpoint(path, format!("record {name}: {e}")))?;
    if t.shape() != shape {
        return Err(Error::checkpoint(path, format!("record {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

fn restore_opt(path: &Path, prefix: &str, meta: OptMeta, store: &ParamStore<f32>, records: &mut BTreeMap<String, Record>) -> Result<Adam<f32>> {
    let mut opt = Adam::new(meta.lr, meta.betas, meta.clip);
    for (name, t) in meta.steps {
        let id = store.id(&name).ok_or_else(|| Error::checkpoint(path, format!("optimizer state for unknown parameter {name}")))?;
        let shape = store.value(id).shape().to_vec();
        let m = take_tensor(path, records, &format!("{prefix}.m.{name}"), &shape)?;
        let v = take_tensor(path, records, &format!("{prefix}.v.{name}"), &shape)?;
        opt.slots.insert(id, AdamSlot { m, v, t });
    }
    Ok(opt)
}

/// Rebuilds the model described by the checkpoint's config and restores every tensor.
pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let mut records: BTreeMap<String, Record> = read_archive(path)?.into_iter().collect();
    let cfg_text = take_bytes(path, &mut records, CONFIG_RECORD)?;
    let cfg_text = String::from_utf8(cfg_text).map_err(|_| Error::checkpoint(path, "config is not UTF-8"))?;
    let cfg = ModelConfig::from_json(&cfg_text).within("core")?;
    let meta = take_bytes(path, &mut records, STATE_RECORD)?;
    let meta: StateMeta = serde_json::from_slice(&meta).map_err(|source| Error::Json { path: path.into(), source })?;
    if meta.format != FORMAT {
        return Err(Error::checkpoint(path, format!("unsupported checkpoint format {}", meta.format)));
    }
    if meta.config_hash != cfg.hash_hex() {
        return Err(Error::checkpoint(path, format!("config hash mismatch: state {} vs config {}", meta.config_hash, cfg.hash_hex())));
    }
    let (model, mut params) = VideoVae::build::<f32>(&cfg).within("core")?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.info(id).name.clone();
        let shape = params.value(id).shape().to_vec();
        *params.value_mut(id) = take_tensor(path, &mut records, &name, &shape)?;
    }
    let opt_g = restore_opt(path, "opt_g", meta.opt_g, &params, &mut records)?;
    let opt_d = restore_opt(path, "opt_d", meta.opt_d, &params, &mut records)?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::checkpoint(path, format!("unexpected record {extra}")));
    }
    let state = TrainState { params, opt_g, opt_d, step: meta.step, rng: meta.rng, config_hash: meta.config_hash };
    Ok(Loaded { model, state })
}

/// Whether a checkpoint trained under `a` may continue under `b`: they may differ only in length.
pub fn resumable(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig { train_steps: 0, ..c.clone() };
    strip(a) == strip(b)
}
