//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"GSLT"`, version `u16`, config length `u32`, config JSON, then for every
//! parameter: name length `u16`, name, rank `u8`, one `u32` per dimension and
//! the raw `f32` values; finally a CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"GSLT";
pub const VERSION: u16 = 1;

/// JSON header stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub config_hash: String,
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig, train: Option<&TrainConfig>) -> Self {
        let config_hash = crate::config_hash(&(model, train));
        CheckpointMeta {
            model: model.clone(),
            train: train.cloned(),
            config_hash,
        }
    }
}

pub fn to_bytes(det: &Detector<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(det.params.scalar_count() * 4 + json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| Error::invalid("config too large"))?.to_le_bytes());
    out.extend_from_slice(&json);
    for p in det.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::invalid("dimension too large"))?.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Detector<f32>, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::data("checkpoint CRC mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    let mut params = ParamStore::new();
    while r.pos < body.len() {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::data("parameter too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params
            .add(&name, Tensor::new(&shape, data).map_err(|e| Error::data(format!("parameter {name}: {e}")))?)
            .map_err(|e| Error::data(e.to_string()))?;
    }
    let det = Detector::from_params(meta.model.clone(), params)?;
    Ok((det, meta))
}

pub fn save(path: &Path, det: &Detector<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(det, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Detector<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
