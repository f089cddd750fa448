//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "DVLT"
//! 4       1         version (1)
//! 5       1         dtype (0 = f32, 1 = f64)
//! 6       1         ndim
//! 7       4*ndim    dims, u32 each
//! ...     w*prod    row-major payload, w = 4 or 8
//! ```
//!
//! A zero-dimensional file holds a single scalar.

use std::fs;
use std::path::Path;

use crate::numerics::{DType, Scalar, Tensor};

use super::StorageError;

pub const MAGIC: [u8; 4] = *b"DVLT";
pub const VERSION: u8 = 1;
const HEADER_FIXED: usize = 7;

/// A tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>, StorageError> {
    if t.ndim() > u8::MAX as usize {
        return Err(StorageError::Unsupported(format!("rank {} exceeds 255", t.ndim())));
    }
    let width = T::DTYPE.size_of();
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * t.ndim() + width * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype_code(T::DTYPE));
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| StorageError::Unsupported(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor, StorageError> {
    if bytes.len() < HEADER_FIXED {
        return Err(StorageError::Truncated {
            expected: HEADER_FIXED,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(StorageError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes[4] != VERSION {
        return Err(StorageError::UnsupportedVersion(bytes[4]));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(StorageError::UnknownDType(other)),
    };
    let ndim = bytes[6] as usize;
    let header = HEADER_FIXED + 4 * ndim;
    if bytes.len() < header {
        return Err(StorageError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[HEADER_FIXED..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(StorageError::InvalidShape(dims));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| StorageError::InvalidShape(dims.clone()))?;
    let payload = count
        .checked_mul(dtype.size_of())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| StorageError::InvalidShape(dims.clone()))?;
    if bytes.len() < payload {
        return Err(StorageError::Truncated {
            expected: payload,
            actual: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(StorageError::SizeMismatch {
            expected: payload,
            actual: bytes.len(),
        });
    }
    let body = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(dims, body)?),
        DType::F64 => AnyTensor::F64(decode_payload(dims, body)?),
    })
}

fn decode_payload<T: Scalar>(dims: Vec<usize>, body: &[u8]) -> Result<Tensor<T>, StorageError> {
    let w = T::DTYPE.size_of();
    let data = body.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(dims.clone(), data).map_err(|_| StorageError::InvalidShape(dims))
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<(), StorageError> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| StorageError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor, StorageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StorageError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| e.at(path))
}

/// Reads a tensor and converts it to `T`.
pub fn read_tensor_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>, StorageError> {
    Ok(read_tensor(path)?.to())
}
