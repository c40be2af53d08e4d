//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "HYBC"
//! version  u32      1
//! cfg_len  u32      length of the TOML text below
//! config   cfg_len  bytes, the full ModelConfig as TOML
//! digest   32 bytes SHA-256 architecture digest of that config
//! count    u32      number of arrays
//! count times:
//!   name_len u32, name (UTF-8), ndim u32, ndim x u64 extents,
//!   product(extents) x f64 values (IEEE-754 little-endian)
//! ```

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::ndgrad::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HYBC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = toml::to_string(&model.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&model.cfg.architecture_digest());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuilds the model stored at `path`. With `expected`, refuses checkpoints
/// whose architecture digest differs from that config's.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    if digest != cfg.architecture_digest() {
        return Err(Error::Checkpoint("stored digest does not match the embedded config".into()));
    }
    if let Some(exp) = expected {
        if exp.architecture_digest() != digest {
            return Err(Error::Checkpoint(
                "architecture digest differs from the run config; the checkpoint was trained for a different network"
                    .into(),
            ));
        }
    }
    let mut model = Model::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} arrays stored, network has {}", model.store.len())));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown array `{name}`")))?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
        model.store.set(id, t).map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}
