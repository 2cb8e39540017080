//! Checkpoint container: JSON metadata + raw little-endian `f64` blobs.
//!
//! Layout: 8-byte magic, `u64` metadata length, metadata JSON, then one blob
//! per parameter (in metadata order), then Adam `m` and `v` blobs when the
//! optimizer state is included. Floats are stored bit-exactly, so
//! save→load→save round-trips are byte-identical; writes go through a
//! temporary file and an atomic rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::Adam;

const MAGIC: &[u8; 8] = b"CVCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the parameters are ("surrogate", "generator", ...).
    pub kind: String,
    pub params: Vec<ParamSpec>,
    /// Present when optimizer state is serialized alongside the parameters.
    pub adam_t: Option<u64>,
    /// Free-form, sorted metadata: seeds, architecture, fingerprints, config.
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    /// `(t, m, v)` when the checkpoint carried optimizer state.
    pub adam_state: Option<(u64, Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)>,
}

impl LoadedCheckpoint {
    /// Rebuild an [`Adam`] from the stored state, or a fresh one if absent.
    pub fn adam(&self) -> Adam {
        match &self.adam_state {
            Some((t, m, v)) => Adam::with_state(&self.params, *t, m.clone(), v.clone()),
            None => Adam::new(&self.params),
        }
    }
}

fn write_blob(out: &mut Vec<u8>, v: &ArrayD<f64>) {
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    params: &ParamSet,
    adam: Option<&Adam>,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        params: params
            .iter()
            .map(|(n, v)| ParamSpec { name: n.to_string(), shape: v.shape().to_vec() })
            .collect(),
        adam_t: adam.map(|a| a.t),
        extra,
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint meta encode: {e}")))?;

    let mut buf = Vec::with_capacity(16 + meta_bytes.len() + params.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    for (_, v) in params.iter() {
        write_blob(&mut buf, v);
    }
    if let Some(a) = adam {
        for m in &a.m {
            write_blob(&mut buf, m);
        }
        for v in &a.v {
            write_blob(&mut buf, v);
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_blob(bytes: &[u8], off: &mut usize, shape: &[usize], path: &Path) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let need = n * 8;
    if *off + need > bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint {} truncated: blob needs {need} bytes at offset {off}",
            path.display()
        )));
    }
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let s = *off + i * 8;
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[s..s + 8]);
        v.push(f64::from_le_bytes(b));
    }
    *off += need;
    ArrayD::from_shape_vec(IxDyn(shape), v)
        .map_err(|e| Error::Data(format!("checkpoint {}: bad blob shape: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + meta_len > bytes.len() {
        return Err(Error::Data(format!("checkpoint {} truncated metadata", path.display())));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| Error::Data(format!("checkpoint {} metadata: {e}", path.display())))?;

    let mut off = 16 + meta_len;
    let mut params = ParamSet::new();
    for spec in &meta.params {
        let v = read_blob(&bytes, &mut off, &spec.shape, path)?;
        params.push(spec.name.clone(), v);
    }
    let adam_state = if let Some(t) = meta.adam_t {
        let mut m = Vec::with_capacity(meta.params.len());
        for spec in &meta.params {
            m.push(read_blob(&bytes, &mut off, &spec.shape, path)?);
        }
        let mut v = Vec::with_capacity(meta.params.len());
        for spec in &meta.params {
            v.push(read_blob(&bytes, &mut off, &spec.shape, path)?);
        }
        Some((t, m, v))
    } else {
        None
    };
    if off != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            bytes.len() - off
        )));
    }
    Ok(LoadedCheckpoint { meta, params, adam_state })
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}
