//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VCK1"
//! 4       4     format version (u32 LE, = 1)
//! 8       4     config length L (u32 LE)
//! 12      L     model config, UTF-8 JSON
//! ..      4     tensor count N (u32 LE)
//! then N records:
//!         4     name length (u32 LE), followed by the UTF-8 name
//!         4     rank R (u32 LE), followed by R extents (u32 LE each)
//!         4·n   values, IEEE-754 f32 LE, row-major
//! footer  8     checksum: sum of all bytes from offset 8 up to the footer, mod 2^64 (u64 LE)
//! ```

use std::fs;
use std::path::Path;

use crate::numerics::Tensor;

use super::{Model, ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sum = byte_sum(&out[8..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, String> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err("bad magic, not a checkpoint".into());
    }
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if byte_sum(&bytes[8..body_end]) != stored {
        return Err("checksum mismatch".into());
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(cur.take(config_len)?).map_err(|e| format!("config record: {e}"))?;
    let count = cur.u32()?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        params.insert(name, t);
    }
    if cur.pos != body_end {
        return Err(format!("{} trailing bytes before footer", body_end - cur.pos));
    }
    Model::from_parts(config, params).map_err(|e| e.to_string())
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|reason| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    })
}
