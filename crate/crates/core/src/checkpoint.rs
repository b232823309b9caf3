//! Binary checkpoints.
//!
//! Layout: magic, format version (`u32`), SHA-256 digest of the model
//! architecture, tensor count (`u32`), then per tensor its name (`u32`
//! length + UTF-8), dtype tag (`u8`), rank (`u32`) and extents (`u64`
//! each), followed by every tensor's raw little-endian values in manifest
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerLM};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"SIMPLEFM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<S: Scalar>(model: &TransformerLM<S>) -> Vec<u8> {
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().digest());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (spec, value) in store.specs().iter().zip(store.values()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(S::DTYPE.tag());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &e in value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for value in store.values() {
        for &x in value.data() {
            x.write_le(&mut out);
        }
    }
    out
}

pub fn save<S: Scalar>(model: &TransformerLM<S>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds a model for `cfg` and fills it from `bytes`.
///
/// The manifest is compared with the inventory of `cfg` before the digest,
/// so a config with different dimensions yields a shape error.
pub fn decode<S: Scalar>(cfg: &ModelConfig, bytes: &[u8]) -> Result<TransformerLM<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut model = TransformerLM::<S>::new(cfg.clone())?;
    let count = r.u32()? as usize;
    if count != model.store().len() {
        return Err(Error::Shape {
            op: "checkpoint_load",
            detail: format!("file holds {count} tensors, config expects {}", model.store().len()),
        });
    }
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let spec = model.store().spec(i);
        if spec.name != name || spec.shape != shape {
            return Err(Error::Shape {
                op: "checkpoint_load",
                detail: format!("tensor {i}: file has {name} {shape:?}, config expects {} {:?}", spec.name, spec.shape),
            });
        }
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!("{name} stored as {}, loading as {}", dtype.name(), S::DTYPE.name())));
        }
    }
    if digest != cfg.digest() {
        return Err(Error::Checkpoint("architecture digest does not match the config".into()));
    }
    let size = S::DTYPE.size();
    for value in model.store_mut().values_mut() {
        let raw = r.take(value.numel() * size)?;
        let data: Vec<S> = raw.chunks_exact(size).map(S::read_le).collect();
        *value = Tensor::new(value.shape().to_vec(), data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load<S: Scalar>(cfg: &ModelConfig, path: &Path) -> Result<TransformerLM<S>> {
    decode(cfg, &fs::read(path)?)
}
