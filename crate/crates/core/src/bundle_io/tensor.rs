//! Self-describing binary tensor files (`*.mten`).
//!
//! Layout, all integers little-endian:
//! - magic: 8 bytes `MARSTEN1`
//! - dtype: u8 (`0` = f32, `1` = u8)
//! - ndim: u8
//! - extents: `ndim` x u32
//! - payload: row-major scalars, `product(extents)` of them

use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"MARSTEN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

// Bitwise equality: -0.0 != 0.0 and NaN payloads compare by pattern.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("bad magic (expected MARSTEN1)")]
    MagicMismatch,
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("i/o: {0}")]
    Io(String),
}

/// An n-dimensional row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements, data has {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|&e| e > u32::MAX as usize) {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} not representable"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalars widened to f64, whatever the stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::U8(_) => None,
        }
    }

    pub fn encode<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.dtype().code(), self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.shape.len() + 4 * self.len());
        self.encode(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes a complete tensor file. Trailing or missing payload bytes are
    /// a shape mismatch; non-finite f32 values are rejected.
    pub fn decode<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| TensorError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 10 || &bytes[..8] != MAGIC {
            return Err(TensorError::MagicMismatch);
        }
        let dtype = DType::from_code(bytes[8]).ok_or(TensorError::UnknownDType(bytes[8]))?;
        let ndim = bytes[9] as usize;
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err(TensorError::ShapeMismatch(format!(
                "header declares {ndim} extents but file has {} bytes",
                bytes.len()
            )));
        }
        let shape: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| TensorError::ShapeMismatch(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| TensorError::ShapeMismatch(format!("shape {shape:?} overflows")))?;
        if payload.len() != expected {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        let blob = Self { shape, data };
        if let Some(i) = blob.first_non_finite() {
            return Err(TensorError::NonFiniteValue(i));
        }
        Ok(blob)
    }
}
