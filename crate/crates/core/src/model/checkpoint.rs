//! Single-file checkpoints:
//!
//! ```text
//! b"STCK" | version: u32 LE | header_len: u64 LE | header JSON | f32 LE blobs
//! ```
//!
//! The header holds the configuration, the optimizer step, the seed and the
//! name, shape and byte offset of every tensor (parameters and both Adam
//! moments). Parameters and moments are kept at 32-bit precision in memory, so
//! saving and loading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CouplingSpec, Forecaster, ModelConfig, Trainer, MODULE};
use crate::autograd::{AdamW, Mat};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    coupling: Option<CouplingSpec>,
    seed: u64,
    step: u64,
    frozen: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let store = &trainer.model.store;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, m: &Mat, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry { name, rows: m.nrows(), cols: m.ncols(), offset: blob.len() });
        for &x in m.iter() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for id in store.ids() {
        let name = store.name(id);
        push(format!("param/{name}"), store.value(id), &mut tensors);
        push(format!("adam_m/{name}"), &trainer.optimizer.m[id.index()], &mut tensors);
        push(format!("adam_v/{name}"), &trainer.optimizer.v[id.index()], &mut tensors);
    }
    let header = Header {
        model: trainer.model.config.clone(),
        coupling: trainer.model.coupling_spec().cloned(),
        seed: trainer.seed,
        step: trainer.optimizer.step,
        frozen: store.ids().filter(|&id| !store.is_trainable(id)).map(|id| store.name(id).to_string()).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(MODULE, dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(MODULE, path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(MODULE, path, e))?;
    let bad = |msg: String| Error::format(MODULE, format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated".into()))?;
    if hlen > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &body[hlen..];

    let mut model = Forecaster::new(header.model.clone(), 0)?;
    if let Some(spec) = header.coupling.clone() {
        model.attach_coupling(spec, 0)?;
    }
    let mut optimizer = AdamW::new(header.model.optimizer, &model.store);
    optimizer.step = header.step;
    let mut seen = vec![[false; 3]; model.store.len()];
    for t in &header.tensors {
        let (kind, name) = t.name.split_once('/').ok_or_else(|| bad(format!("tensor name {:?}", t.name)))?;
        let id = model.store.id(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let end = t.offset + t.rows * t.cols * 4;
        let raw = blob.get(t.offset..end).ok_or_else(|| bad(format!("tensor {} exceeds the file", t.name)))?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), data).expect("length computed from shape");
        if m.dim() != model.store.value(id).dim() {
            return Err(Error::shape(MODULE, format!("tensor {} is {:?}, model expects {:?}", t.name, m.dim(), model.store.value(id).dim())));
        }
        let slot = match kind {
            "param" => {
                model.store.set(id, m)?;
                0
            }
            "adam_m" => {
                optimizer.m[id.index()] = m;
                1
            }
            "adam_v" => {
                optimizer.v[id.index()] = m;
                2
            }
            _ => return Err(bad(format!("unknown tensor kind {kind}"))),
        };
        seen[id.index()][slot] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&x| x)) {
        return Err(bad(format!("missing tensors for {}", model.store.name(model.store.ids().nth(i).expect("index in range")))));
    }
    for name in &header.frozen {
        let id = model.store.id(name).ok_or_else(|| bad(format!("unknown frozen parameter {name}")))?;
        model.store.set_frozen(id, true);
    }
    if !model.store.all_finite() {
        return Err(Error::non_finite(MODULE, "checkpoint contains NaN or infinity"));
    }
    Ok(Trainer { model, optimizer, seed: header.seed })
}
