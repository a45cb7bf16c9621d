//! `T1PT` raw tensor files.
//!
//! Layout (all little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `T1PT`                              |
//! | 1            | format version (1)                        |
//! | 1            | dtype: 1 = f32, 2 = complex f32 pairs, 3 = u8 |
//! | 1            | rank `r`                                  |
//! | 4·r          | dims as u32                               |
//! | rest         | row-major payload                         |

use std::fs;
use std::path::Path;

use num_complex::Complex32;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"T1PT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    C64 = 2,
    U8 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::C64),
            3 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::C64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    C64(Vec<Complex32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::C64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::C64(_) => DType::C64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format("tensor rank exceeds 255".into()));
        }
        if count != data.len() as u64 {
            return Err(Error::Format(format!("dims {dims:?} hold {count} values, payload has {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<u32>, values: &[f64]) -> Result<Self> {
        Self::new(dims, TensorData::F32(values.iter().map(|&v| v as f32).collect()))
    }

    pub fn from_mask(dims: Vec<u32>, mask: &[bool]) -> Result<Self> {
        Self::new(dims, TensorData::U8(mask.iter().map(|&m| m as u8).collect()))
    }

    /// Values widened to `f64` (f32 tensors only).
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::Format("expected an f32 tensor".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::C64(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes.get(..7).ok_or_else(|| Error::Format("file shorter than the header".into()))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("missing T1PT magic".into()));
        }
        if header[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header[4])));
        }
        let dtype = DType::from_code(header[5])?;
        let rank = header[6] as usize;
        let dims_end = 7 + 4 * rank;
        let dim_bytes = bytes.get(7..dims_end).ok_or_else(|| Error::Format("truncated dims".into()))?;
        let dims: Vec<u32> = dim_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        let payload = &bytes[dims_end..];
        if payload.len() as u64 != count * dtype.size() as u64 {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                count * dtype.size() as u64
            )));
        }
        let f32_at = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap());
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(f32_at).collect()),
            DType::C64 => TensorData::C64(
                payload.chunks_exact(8).map(|c| Complex32::new(f32_at(&c[..4]), f32_at(&c[4..]))).collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
