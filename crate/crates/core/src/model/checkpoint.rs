//! Checkpoint files.
//!
//! Layout: the magic `TANCKPT1`, a little-endian u64 byte length followed by
//! a JSON header (`{"config": ..., "meta": ..., "groups": [...]}`), then for
//! every tensor in every group: a u64 name length, the UTF-8 name and the
//! tensor blob (u64 rows, u64 cols, f64 data, all little-endian).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor2D;

const MAGIC: &[u8; 8] = b"TANCKPT1";

/// Model parameters plus optional extra tensor groups (EMA teacher,
/// optimizer moments) and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: serde_json::Value,
    pub extra: Vec<(String, ModelParams)>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            meta: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }

    pub fn group(&self, name: &str) -> Option<&ModelParams> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    groups: Vec<String>,
}

fn io_err(e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let mut groups = vec!["params".to_string()];
    groups.extend(ckpt.extra.iter().map(|(n, _)| n.clone()));
    let header = Header {
        config: ckpt.params.config.clone(),
        meta: ckpt.meta.clone(),
        groups,
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;
    let all = std::iter::once(&ckpt.params).chain(ckpt.extra.iter().map(|(_, p)| p));
    for group in all {
        if !group.same_shapes(&ckpt.params) {
            return Err(ModelError::Checkpoint("tensor group shapes differ from params".into()));
        }
        for (_, name, t) in group.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            t.write_to(w).map_err(io_err)?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = read_u64(r)? as usize;
    if hlen > 1 << 24 {
        return Err(ModelError::Checkpoint("header too large".into()));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let n = ModelParams::init(header.config.clone(), 0)?.len();
    let mut groups = Vec::with_capacity(header.groups.len());
    for gname in &header.groups {
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u64(r)? as usize;
            if len > 4096 {
                return Err(ModelError::Checkpoint("tensor name too long".into()));
            }
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb).map_err(io_err)?;
            let name = String::from_utf8(nb).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let t = Tensor2D::read_from(r)?;
            named.push((name, t));
        }
        groups.push((gname.clone(), ModelParams::from_named(header.config.clone(), named)?));
    }
    let mut it = groups.into_iter();
    let (_, params) = it
        .next()
        .ok_or_else(|| ModelError::Checkpoint("no parameter group".into()))?;
    Ok(Checkpoint {
        params,
        meta: header.meta,
        extra: it.collect(),
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err)?;
    read_checkpoint(&mut bytes.as_slice())
}
