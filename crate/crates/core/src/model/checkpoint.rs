//! `MCKP` checkpoint container.
//!
//! Layout: `b"MCKP"`, `u32` version, `u64` metadata length, UTF-8 JSON
//! metadata (config plus a tensor directory of name, shape and byte offset
//! into the payload), then the raw little-endian `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MoEModel};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    digest: String,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &MoEModel, mut w: W) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let named = model.named_tensors();
    for (name, _, m) in &named {
        entries.push(TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset });
        offset += 4 * m.len() as u64;
    }
    let meta = Metadata { config: model.config.clone(), digest: model.digest(), tensors: entries };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, _, m) in &named {
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MoEModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let meta: Metadata = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past end of payload", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Matrix::from_vec(t.shape[0], t.shape[1], data)?);
    }
    let model = MoEModel::from_tensors(meta.config, tensors)
        .map_err(|e| Error::Format(format!("checkpoint layout: {e}")))?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    if names.iter().zip(&meta.tensors).any(|(a, b)| *a != b.name) {
        return Err(Error::Format("tensor directory order does not match model layout".into()));
    }
    if model.digest() != meta.digest {
        return Err(Error::Format("checkpoint digest does not match its contents".into()));
    }
    Ok(model)
}

impl MoEModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(self, std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
