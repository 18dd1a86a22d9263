//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "UVIP"  u32 version  u64 step  f64 momentum
//! u32 config length, config as JSON
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 rank, u32 extent × rank, u64 byte offset
//! data section: f32 values, offsets relative to its start
//! ```
//!
//! Online tensors are stored as `online.<name>`, target ones as `target.<name>`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ModelConfig, ModelState, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"UVIP";

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>) -> Vec<u8> {
    let config = serde_json::to_vec(&state.config).expect("config serializes");
    let tensors: Vec<(String, &Tensor<T>)> = state
        .online
        .iter()
        .map(|(n, t)| (format!("online.{n}"), t))
        .chain(state.target.iter().map(|(n, t)| (format!("target.{n}"), t)))
        .collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.momentum.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated: wanted {n} more bytes"))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelState<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let step = u64::from_le_bytes(r.array()?);
    let momentum = f64::from_le_bytes(r.array()?);
    let config_len = u32::from_le_bytes(r.array()?) as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).map_err(|e| r.corrupt(format!("model config: {e}")))?;
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let offset = u64::from_le_bytes(r.array()?) as usize;
        table.push((name, shape, offset));
    }
    let data_start = r.pos;
    let mut online = Vec::new();
    let mut target = Vec::new();
    for (name, shape, offset) in table {
        let n: usize = shape.iter().product();
        r.pos = data_start
            .checked_add(offset)
            .ok_or_else(|| r.corrupt("offset overflow"))?;
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.corrupt(format!("tensor `{name}`: {e}")))?;
        if let Some(n) = name.strip_prefix("online.") {
            online.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("target.") {
            target.push((n.to_string(), t));
        } else {
            return Err(r.corrupt(format!("unexpected tensor `{name}`")));
        }
    }
    let state = ModelState {
        config,
        online: ParamSet::new(online),
        target: ParamSet::new(target),
        momentum,
        step,
    };
    state.validate().map_err(|e| r.corrupt(e.to_string()))?;
    Ok(state)
}

pub fn write_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    load_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn round_trip_is_exact() {
        let mut s = ModelState::<f32>::init(ModelConfig::default(), 0.995, &mut rng_from(8)).unwrap();
        s.step = 1234;
        let bytes = save_checkpoint(&s);
        assert_eq!(&bytes[..4], b"UVIP");
        let back: ModelState<f32> = load_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_damage() {
        let s = ModelState::<f32>::init(ModelConfig::default(), 0.99, &mut rng_from(8)).unwrap();
        let bytes = save_checkpoint(&s);
        let p = Path::new("mem");
        assert!(matches!(
            load_checkpoint::<f32>(&bytes[..bytes.len() - 1], p),
            Err(Error::Corrupt { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            load_checkpoint::<f32>(&bad, p),
            Err(Error::Corrupt { offset: 0, .. })
        ));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(load_checkpoint::<f32>(&bad, p).is_err());
    }
}
