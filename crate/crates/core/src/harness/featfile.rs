//! Binary tensor container.
//!
//! Layout, all little-endian: magic `FIAT`, `u16` version (1), `u16` rank,
//! `rank × u32` dims, then `product(dims)` `f32` values in row-major order.

use std::path::Path;

use fian_numerics::{Scalar, Tensor};
use thiserror::Error;

use crate::error::{FianError, Result};

pub const MAGIC: [u8; 4] = *b"FIAT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("header truncated")]
    TruncatedHeader,
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("dims {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("dims {0:?} contain a zero extent")]
    ZeroDim(Vec<u32>),
}

impl FeatureFileError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            Self::BadMagic(_) => 1,
            Self::UnsupportedVersion(_) => 2,
            Self::TruncatedHeader => 3,
            Self::Truncated { .. } => 4,
            Self::TrailingBytes(_) => 5,
            Self::DimOverflow(_) => 6,
            Self::ZeroDim(_) => 7,
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, FeatureFileError> {
    if bytes.len() < 4 {
        return Err(FeatureFileError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(FeatureFileError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(FeatureFileError::TruncatedHeader);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FeatureFileError::UnsupportedVersion(version));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(FeatureFileError::TruncatedHeader);
    }
    let dims: Vec<u32> =
        bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    if dims.contains(&0) {
        return Err(FeatureFileError::ZeroDim(dims));
    }
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| FeatureFileError::DimOverflow(dims.clone()))?;
    let found = bytes.len() - header;
    if found < expected {
        return Err(FeatureFileError::Truncated { expected, found });
    }
    if found > expected {
        return Err(FeatureFileError::TrailingBytes(found - expected));
    }
    let data =
        bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(shape, data).expect("length checked against dims"))
}

pub fn write_feature_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| FianError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| FianError::io(path, e))?;
    decode(&bytes).map_err(|source| FianError::FeatureFile { path: path.to_path_buf(), source })
}
