//! Binary checkpoint: length-prefixed records holding a manifest, the model
//! configuration and every named parameter tensor. Layout is documented in
//! `docs/checkpoint-format.md`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::Group;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FATCKPT1";

const KIND_MANIFEST: u8 = 1;
const KIND_CONFIG: u8 = 2;
const KIND_TENSOR: u8 = 3;

/// One line per parameter: `name group trainable|buffer d0xd1x...`.
pub fn manifest<T: Scalar>(model: &Model<T>) -> String {
    let mut out = String::new();
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let kind = if p.trainable { "trainable" } else { "buffer" };
        let _ = writeln!(out, "{} {} {} {}", p.name, p.group, kind, dims.join("x"));
    }
    out
}

fn record(out: &mut Vec<u8>, kind: u8, name: &str, payload: &[u8]) {
    out.push(kind);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = 2 + model.store.len() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    record(&mut out, KIND_MANIFEST, "manifest", manifest(model).as_bytes());
    record(&mut out, KIND_CONFIG, "config", model.cfg.to_text().as_bytes());
    for (_, p) in model.store.iter() {
        let shape = p.value.shape();
        let mut payload = Vec::with_capacity(6 + 8 * shape.len() + 8 * p.value.numel());
        payload.push(match p.group {
            Group::Backbone => 0,
            Group::Transformer => 1,
        });
        payload.push(p.trainable as u8);
        payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        record(&mut out, KIND_TENSOR, &p.name, &payload);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Data(format!("checkpoint truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Data(format!("checkpoint {what} is not UTF-8")))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut model: Option<Model<T>> = None;
    let mut loaded = 0usize;
    for _ in 0..count {
        let kind = r.u8()?;
        let name_len = r.u32()? as usize;
        let name = utf8(r.take(name_len)?, "record name")?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        match kind {
            KIND_MANIFEST => {}
            KIND_CONFIG => {
                let cfg = ModelConfig::from_text(&utf8(payload, "config")?)?;
                model = Some(Model::new(cfg, 0)?);
            }
            KIND_TENSOR => {
                let m = model
                    .as_mut()
                    .ok_or_else(|| Error::Data("checkpoint tensor precedes its config".into()))?;
                load_tensor(m, &name, payload)?;
                loaded += 1;
            }
            k => return Err(Error::Data(format!("unknown checkpoint record kind {k}"))),
        }
    }
    let model = model.ok_or_else(|| Error::Data("checkpoint has no config record".into()))?;
    if loaded != model.store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {loaded} tensors, model expects {}",
            model.store.len()
        )));
    }
    Ok(model)
}

fn load_tensor<T: Scalar>(model: &mut Model<T>, name: &str, payload: &[u8]) -> Result<()> {
    let mut r = Reader { buf: payload, pos: 0 };
    let group = match r.u8()? {
        0 => Group::Backbone,
        1 => Group::Transformer,
        g => return Err(Error::Data(format!("{name}: unknown group tag {g}"))),
    };
    let trainable = r.u8()? != 0;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| r.u64().map(|b| T::lit(f64::from_bits(b))))
        .collect::<Result<Vec<_>>>()?;
    let id = model
        .store
        .id(name)
        .ok_or_else(|| Error::Data(format!("checkpoint parameter `{name}` not in model")))?;
    let p = model.store.get(id);
    if p.group != group || p.trainable != trainable || p.value.shape() != shape {
        return Err(Error::Data(format!(
            "checkpoint parameter `{name}` ({group}, {shape:?}) does not match model ({}, {:?})",
            p.group,
            p.value.shape()
        )));
    }
    model.store.set(id, Tensor::new(shape, data)?)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}
