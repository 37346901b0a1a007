//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `TRJCKPT\0`, `u32` version, `u64` config length, config JSON,
//! `u32` tensor count, then per tensor: `u32` name length, name, `u32` rank,
//! `u64` per dimension, `f32` payload. A 32-byte SHA-256 of everything before
//! it closes the file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelState, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TRJCKPT\0";

fn encode<F: Real>(model: &ModelState<F>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let specs = model.layout().specs();
    buf.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in specs {
        buf.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &model.params()[spec.offset..spec.offset + spec.numel()] {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<ModelState<f32>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: MAGIC.len() };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.len()?;
    let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)?;
    config.validate()?;
    let layout = super::ParamLayout::new(&config);
    let count = cur.u32()? as usize;
    if count != layout.specs().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config expects {}",
            layout.specs().len()
        )));
    }
    let mut params = vec![0f32; layout.total()];
    for spec in layout.specs() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if name != spec.name {
            return Err(Error::Format(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Format(format!("tensor {name} has shape {shape:?}, expected {:?}", spec.shape)));
        }
        let raw = cur.take(4 * spec.numel())?;
        for (dst, chunk) in params[spec.offset..].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    ModelState::from_parts(config, params)
}

pub fn write_checkpoint<F: Real, W: Write>(model: &ModelState<F>, mut w: W) -> Result<()> {
    w.write_all(&encode(model)?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint<F: Real>(model: &ModelState<F>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, encode(model)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, HeadKind};
    use super::*;

    fn model() -> ModelState<f32> {
        let mut cfg = ModelConfig::new(HeadKind::Discrete { dim: 3, vocab: 4 }, 2, 2, 4, 8);
        cfg.embed_dim = 16;
        init_model(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn corruption_is_detected() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mid = buf.len() / 2;
        buf[mid] ^= 1;
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 5]).is_err());
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.bin");
        assert!(matches!(load_checkpoint(&p), Err(Error::MissingArtifact(_))));
        save_checkpoint(&model(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), model());
    }
}
