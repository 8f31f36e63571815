//! Binary checkpoint format.
//!
//! ```text
//! "MMKS" | u32 version | u32 header_len | header (JSON) | u32 tensor_count
//! per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f32 data[..]
//! ```
//!
//! All integers and floats are little-endian. Values are stored as f32 and
//! widened back to f64 on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::{NamedTensors, Tensor};
use crate::textproc::Vocabulary;
use crate::Task;

pub const MAGIC: &[u8; 4] = b"MMKS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// SHA-256 of the vocabulary JSON the model was trained with.
    pub vocab_sha256: String,
    pub step: u64,
    pub tasks: Vec<Task>,
    pub retrieval_k: usize,
    pub metrics: BTreeMap<String, f64>,
}

pub fn vocab_hash(v: &Vocabulary) -> String {
    let digest = Sha256::digest(v.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(header: &CheckpointHeader, params: &NamedTensors) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(
        16 + json.len() + params.values().map(|t| 4 * t.numel() + 64).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, NamedTensors)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (this build reads version {FORMAT_VERSION})"
        )));
    }
    let hlen = r.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()?;
    let mut params = NamedTensors::new();
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, params))
}

/// Atomic write (temp file, then rename).
pub fn save(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(header, &params.tensors)?)
}

/// Loads and checks tensor names and shapes against the stored config.
pub fn load(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) =
        from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    header.config.validate()?;
    let params = ModelParams { tensors };
    params
        .check_against(&header.config)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let model = Model {
        cfg: header.config.clone(),
        params,
    };
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn nano() -> ModelConfig {
        crate::config::RunConfig::preset("test-nano").unwrap().model
    }

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            config: nano(),
            vocab_sha256: "00".into(),
            step: 12,
            tasks: vec![Task::Sum],
            retrieval_k: 3,
            metrics: BTreeMap::from([("dev_loss".to_string(), 1.25)]),
        }
    }

    #[test]
    fn round_trip_within_f32() {
        let p = init_params(&nano(), 3).unwrap();
        let bytes = to_bytes(&header(), &p.tensors).unwrap();
        let (h, t) = from_bytes(&bytes).unwrap();
        assert_eq!(h, header());
        for (name, a) in &p.tensors {
            for (x, y) in a.data().iter().zip(t[name].data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30), "{name}");
            }
        }
    }

    #[test]
    fn version_mismatch_refused() {
        let p = init_params(&nano(), 3).unwrap();
        let mut bytes = to_bytes(&header(), &p.tensors).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let e = from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
    }

    #[test]
    fn corrupt_files_refused() {
        let p = init_params(&nano(), 3).unwrap();
        let bytes = to_bytes(&header(), &p.tensors).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
