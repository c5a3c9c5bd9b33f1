//! The `MMCK` checkpoint file.
//!
//! ```text
//! "MMCK" | version u32 = 1 | config_len u32 | config text (UTF-8)
//! then per tensor until EOF:
//!   name_len u32 | name | ndim u32 | dims u32 x ndim | f32 LE payload
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::io::{read_file, write_atomic};
use crate::error::{Error, FormatError, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = params.config.to_text();
    push_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, _, t) in params.entries() {
        if !seen.insert(name.clone()) {
            return Err(FormatError::NameCollision(name).into());
        }
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(FormatError::TruncatedPayload {
                expected: n,
                found: left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint; every tensor named by the embedded config must be
/// present exactly once with its expected shape.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(FormatError::TruncatedHeader.into());
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch(version).into());
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|e| FormatError::Config(format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_text(text)?;

    let mut found: HashMap<String, Tensor<f32>> = HashMap::new();
    while !r.done() {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| FormatError::Config(format!("tensor name is not UTF-8: {e}")))?;
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| FormatError::Config(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if found.contains_key(&name) {
            return Err(FormatError::NameCollision(name).into());
        }
        let t = Tensor::new(&dims, data).map_err(|_| FormatError::TensorShape {
            name: name.clone(),
            expected: Vec::new(),
            found: dims.clone(),
        })?;
        found.insert(name, t);
    }

    let mut params = ModelParams::<f32>::skeleton(&config);
    for (name, _, slot) in params.entries_mut() {
        let t = found
            .remove(&name)
            .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
        if t.shape() != slot.shape() {
            return Err(FormatError::TensorShape {
                name,
                expected: slot.shape().to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        *slot = t;
    }
    if let Some(name) = found.into_keys().min() {
        return Err(FormatError::UnexpectedTensor(name).into());
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    decode_checkpoint(&read_file(path)?)
}
