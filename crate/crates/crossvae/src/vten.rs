//! The VTEN tensor file format.
//!
//! ```text
//! "VTEN" | version u16 | dtype u8 | rank u8 | dims u32[rank] | payload
//! ```
//!
//! All integers and f32 values are little-endian and the payload is row-major.
//! Videos are stored as (C, T, H, W) with pixels in [0, 1]; in memory they
//! live in [-1, 1]. dtype 1 (raw bytes) is only used for checkpoint metadata;
//! tensor and video readers accept dtype 0 exclusively.

use std::fs;
use std::io;
use std::path::Path;

use crossvae_core::{Tensor, VideoTensor};
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VTEN";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum VtenError {
    #[error("bad magic {0:?}, expected \"VTEN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unsupported dtype {0}, expected 0 (f32)")]
    DType(u8),
    #[error("payload length mismatch: header declares {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("expected a rank-{expected} tensor, got rank {found}")]
    Rank { expected: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// One header plus payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Record { dims: t.shape().to_vec(), payload: Payload::F32(t.data().to_vec()) }
    }

    pub fn bytes(data: &[u8]) -> Self {
        Record { dims: vec![data.len()], payload: Payload::U8(data.to_vec()) }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor<f32>, VtenError> {
        match self.payload {
            Payload::F32(data) => Tensor::from_vec(&self.dims, data).map_err(|e| VtenError::Invalid(e.to_string())),
            Payload::U8(_) => Err(VtenError::DType(DType::U8 as u8)),
        }
    }

    pub fn into_bytes(self) -> Result<Vec<u8>, VtenError> {
        match self.payload {
            Payload::U8(data) => Ok(data),
            Payload::F32(_) => Err(VtenError::Invalid("expected a byte record".into())),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) -> Result<(), VtenError> {
        let rank = u8::try_from(self.dims.len()).map_err(|_| VtenError::Invalid(format!("rank {} exceeds 255", self.dims.len())))?;
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(rank);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| VtenError::Invalid(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        Ok(())
    }

    /// Parses one record from the front of `bytes`, returning it and the bytes consumed.
    /// The payload may be followed by further data.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Record, usize), VtenError> {
        if bytes.len() < HEADER_FIXED {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(VtenError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(VtenError::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(VtenError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(VtenError::Version(version));
        }
        let dtype = match bytes[6] {
            0 => DType::F32,
            1 => DType::U8,
            other => return Err(VtenError::DType(other)),
        };
        let rank = bytes[7] as usize;
        let dims_end = HEADER_FIXED + 4 * rank;
        if bytes.len() < dims_end {
            return Err(VtenError::TruncatedHeader);
        }
        let dims: Vec<usize> =
            bytes[HEADER_FIXED..dims_end].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
        let expected = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| VtenError::Invalid(format!("dimensions {dims:?} overflow")))?;
        let available = (bytes.len() - dims_end) as u64;
        if available < expected {
            return Err(VtenError::LengthMismatch { expected, found: available });
        }
        let body = &bytes[dims_end..dims_end + expected as usize];
        let payload = match dtype {
            DType::F32 => Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
            DType::U8 => Payload::U8(body.to_vec()),
        };
        Ok((Record { dims, payload }, dims_end + expected as usize))
    }

    /// Parses a buffer holding exactly one record.
    pub fn decode(bytes: &[u8]) -> Result<Record, VtenError> {
        let (rec, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            let header = used - payload_len(&rec);
            return Err(VtenError::LengthMismatch { expected: payload_len(&rec) as u64, found: (bytes.len() - header) as u64 });
        }
        Ok(rec)
    }
}

fn payload_len(rec: &Record) -> usize {
    match &rec.payload {
        Payload::F32(v) => 4 * v.len(),
        Payload::U8(v) => v.len(),
    }
}

fn read_record(path: &Path) -> Result<Record> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Record::decode(&bytes).map_err(|source| Error::Vten { path: path.into(), source })
}

fn write_record(path: &Path, rec: &Record) -> Result<()> {
    let mut out = Vec::new();
    rec.encode(&mut out).map_err(|source| Error::Vten { path: path.into(), source })?;
    fs::write(path, out).map_err(Error::io(path))
}

/// Writes a raw f32 tensor (latents, parameters) without any value mapping.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_record(path.as_ref(), &Record::from_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let rec = read_record(path)?;
    if rec.dtype() != DType::F32 {
        return Err(Error::Vten { path: path.into(), source: VtenError::DType(rec.dtype() as u8) });
    }
    rec.into_tensor().map_err(|source| Error::Vten { path: path.into(), source })
}

/// Reads a rank-4 tensor, e.g. a latent written by `encode`.
pub fn read_rank4(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    if t.rank() != 4 {
        return Err(Error::Vten { path: path.into(), source: VtenError::Rank { expected: 4, found: t.rank() } });
    }
    Ok(t)
}

/// Stores `v` as [0, 1] pixels.
pub fn write_video(path: impl AsRef<Path>, v: &VideoTensor<f32>) -> Result<()> {
    write_tensor(path, &v.to_unit())
}

/// Loads a [0, 1] clip into the internal [-1, 1] range.
pub fn read_video(path: impl AsRef<Path>) -> Result<VideoTensor<f32>> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    if t.rank() != 4 {
        return Err(Error::Vten { path: path.into(), source: VtenError::Rank { expected: 4, found: t.rank() } });
    }
    VideoTensor::from_unit(t).map_err(|e| Error::Vten { path: path.into(), source: VtenError::Invalid(e.to_string()) })
}

/// The clip a save followed by a load would produce.
pub fn stored(v: &VideoTensor<f32>) -> VideoTensor<f32> {
    VideoTensor::from_unit(v.to_unit()).expect("a valid clip stays valid through the [0, 1] mapping")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded(rec: &Record) -> Vec<u8> {
        let mut out = Vec::new();
        rec.encode(&mut out).unwrap();
        out
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encoded(&Record::from_tensor(&t));
        assert_eq!(&b[..4], b"VTEN");
        assert_eq!(&b[4..8], &[1, 0, 0, 2]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn distinct_validation_errors() {
        let t = Tensor::from_vec(&[3], vec![0.0f32, 0.5, 1.0]).unwrap();
        let good = encoded(&Record::from_tensor(&t));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Record::decode(&magic), Err(VtenError::BadMagic(_))));
        let mut dtype = good.clone();
        dtype[6] = 7;
        assert!(matches!(Record::decode(&dtype), Err(VtenError::DType(7))));
        let short = &good[..good.len() - 1];
        let err = Record::decode(short).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Record::decode(&long), Err(VtenError::LengthMismatch { expected: 12, found: 13 })));
        assert!(matches!(Record::decode(&good[..6]), Err(VtenError::TruncatedHeader)));
    }

    #[test]
    fn byte_records_round_trip() {
        let rec = Record::bytes(b"{\"a\":1}");
        assert_eq!(Record::decode(&encoded(&rec)).unwrap(), rec);
    }
}
