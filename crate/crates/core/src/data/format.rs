//! The `MMV1` volume file.
//!
//! ```text
//! "MMV1" | n_channels u32 | D u32 | H u32 | W u32 | dtype u8 | payload
//! ```
//!
//! Integers are little-endian. dtype 0 is `f32` LE, dtype 1 is `u8` labels.
//! The payload is channel-major, then depth, row, column.

use std::path::Path;

use super::io::{read_file, write_atomic};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, MultiModalVolume};

pub const VOLUME_MAGIC: [u8; 4] = *b"MMV1";
pub const HEADER_LEN: usize = 21;
const DTYPE_F32: u8 = 0;
const DTYPE_LABEL: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Intensity(MultiModalVolume),
    Labels(LabelVolume),
}

/// Parsed fixed-size header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub channels: usize,
    pub dims: (usize, usize, usize),
    pub dtype: u8,
}

impl VolumeHeader {
    /// Payload size implied by the header, or `None` on overflow.
    pub fn payload_len(&self) -> Option<usize> {
        let (d, h, w) = self.dims;
        let width = if self.dtype == DTYPE_F32 { 4 } else { 1 };
        [self.channels, d, h, w, width]
            .iter()
            .try_fold(1usize, |acc, &v| acc.checked_mul(v))
    }
}

fn u32_at(b: &[u8], off: usize) -> usize {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes")) as usize
}

pub fn decode_header(bytes: &[u8]) -> Result<VolumeHeader, FormatError> {
    if bytes.len() < 4 || bytes[..4] != VOLUME_MAGIC {
        return Err(FormatError::BadMagic {
            expected: VOLUME_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader);
    }
    let dtype = bytes[20];
    if dtype != DTYPE_F32 && dtype != DTYPE_LABEL {
        return Err(FormatError::UnknownDtype(dtype));
    }
    Ok(VolumeHeader {
        channels: u32_at(bytes, 4),
        dims: (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)),
        dtype,
    })
}

fn header_bytes(channels: usize, dims: (usize, usize, usize), dtype: u8) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&VOLUME_MAGIC);
    for v in [channels, dims.0, dims.1, dims.2] {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidArgument(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(dtype);
    Ok(out)
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    match volume {
        Volume::Intensity(v) => {
            let mut out = header_bytes(v.modalities(), v.dims(), DTYPE_F32)?;
            out.reserve(v.tensor().len() * 4);
            for x in v.tensor().data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            Ok(out)
        }
        Volume::Labels(l) => {
            let mut out = header_bytes(1, l.dims(), DTYPE_LABEL)?;
            out.extend_from_slice(l.data());
            Ok(out)
        }
    }
}

/// Validates the header completely before reading any payload.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let header = decode_header(bytes)?;
    let (d, h, w) = header.dims;
    if header.channels == 0 || d == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "volume header has a zero extent: {} x {:?}",
            header.channels, header.dims
        )));
    }
    let expected = header
        .payload_len()
        .ok_or_else(|| Error::InvalidArgument("volume extents overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected).into());
    }
    if header.dtype == DTYPE_F32 {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&[header.channels, d, h, w], data)?;
        Ok(Volume::Intensity(MultiModalVolume::new(t)?))
    } else {
        if header.channels != 1 {
            return Err(FormatError::WrongKind("single-channel label volume").into());
        }
        Ok(Volume::Labels(LabelVolume::new(
            (d, h, w),
            payload.to_vec(),
        )?))
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(volume)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_file(path)?)
}

pub fn read_intensity(path: &Path) -> Result<MultiModalVolume> {
    match read_volume(path)? {
        Volume::Intensity(v) => Ok(v),
        Volume::Labels(_) => Err(FormatError::WrongKind("f32 intensity volume").into()),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Labels(l) => Ok(l),
        Volume::Intensity(_) => Err(FormatError::WrongKind("u8 label volume").into()),
    }
}
