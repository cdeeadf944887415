//! Checkpoint file: `TRCMODEL`, manifest length (u64 LE), JSON manifest, then
//! every parameter as little-endian `f64` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, QueryModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TRCMODEL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

/// A model together with the optimizer step it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: QueryModel,
    pub step: u64,
}

pub fn encode_checkpoint(model: &QueryModel, step: u64) -> Result<Vec<u8>> {
    let store = model.params();
    let manifest = Manifest {
        config: model.config().clone(),
        step,
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;

    let mut model = QueryModel::new(manifest.config.clone(), 0)?;
    let mut cursor = 16 + len;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| Error::Format(format!("truncated payload at `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(&entry.shape, data)?);
        cursor += 8 * n;
    }
    if cursor != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cursor
        )));
    }
    let names: Vec<String> = manifest.params.into_iter().map(|e| e.name).collect();
    model.params_mut().load(&names, tensors)?;
    Ok(Checkpoint {
        model,
        step: manifest.step,
    })
}

pub fn write_checkpoint(path: &Path, model: &QueryModel, step: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, step)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let model = QueryModel::new(ModelConfig::desk(), 11).unwrap();
        let bytes = encode_checkpoint(&model, 42).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.model.params(), model.params());
        assert_eq!(encode_checkpoint(&ck.model, 42).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let model = QueryModel::new(ModelConfig::desk(), 11).unwrap();
        let bytes = encode_checkpoint(&model, 0).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
    }
}
