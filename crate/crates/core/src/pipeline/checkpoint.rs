//! Single-file checkpoint: `RFLW`, a little-endian `u32` format version, a
//! `u64` length followed by JSON metadata, then a `u32` tensor count and for
//! every tensor a `u32` name length, the UTF-8 name, `u32` rows, `u32` cols
//! and `rows * cols` little-endian `f32` values.

use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::DenoiserModel;
use super::train::EpochStats;
use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::preprocess::TableCodec;
use crate::relschema::RelationalSchema;

pub const MAGIC: &[u8; 4] = b"RFLW";
pub const FORMAT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub model: DenoiserModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    schema_hash: String,
    schema: RelationalSchema,
    codecs: Vec<TableCodec>,
    config: RunConfig,
    best_epoch: usize,
    best_val: f64,
    history: Vec<EpochStats>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn schema_hash(&self) -> String {
        self.model.schema.structure_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            schema_hash: self.schema_hash(),
            schema: self.model.schema.clone(),
            codecs: self.model.codecs.clone(),
            config: self.model.config.clone(),
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(json.len() + 4 * self.model.store.num_scalars() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.store.len() as u32).to_le_bytes());
        for (name, t) in self.model.store.named() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(4);
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| corrupt("truncated checkpoint"))?;
        let len = u64::from_le_bytes(len) as usize;
        let start = r.position() as usize;
        let json = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("bad metadata: {e}")))?;
        r.set_position((start + len) as u64);
        if meta.schema.structure_hash() != meta.schema_hash {
            return Err(corrupt("schema hash does not match the stored schema"));
        }

        let count = read_u32(&mut r)? as usize;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| corrupt("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| corrupt("tensor too large"))?;
            let remaining = bytes.len() - r.position() as usize;
            if n.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(corrupt(format!("truncated tensor `{name}`")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_bits(read_u32(&mut r)?));
            }
            tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let mut model = DenoiserModel::new(&meta.schema, meta.codecs, meta.config)?;
        model.store.load_named(&tensors)?;
        Ok(Checkpoint {
            model,
            history: meta.history,
            best_epoch: meta.best_epoch,
            best_val: meta.best_val,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
