//! Binary tensor files and JSON configuration documents.
//!
//! Layout of a tensor file, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic "L2CTENS0"
//! 8       1           dtype (0 = f32, 1 = f64)
//! 9       4           ndim (u32, 1..=4)
//! 13      8 * ndim    dims (u64 each)
//! ...     n * width   row-major payload
//! ```
//!
//! Values are held as `f64` in memory; `f32` payloads are widened on read.

mod stats_config;

pub use stats_config::{read_stats_config, SearchRanges, SearchSettings, StatsConfig};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"L2CTENS0";
pub const MAX_NDIM: usize = 4;
const HEADER_FIXED: usize = 8 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::InvalidArgument(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Dense row-major tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(Error::BadHeader(format!("rank {} outside [1, {MAX_NDIM}]", shape.len())));
        }
        let count = element_count(&shape)?;
        if count == 0 {
            return Err(Error::BadHeader("tensor has no elements".into()));
        }
        if count != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {count} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.shape[..] {
            [rows, cols] => Matrix::from_vec(rows, cols, self.data),
            _ => Err(Error::ShapeMismatch(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Tensor::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    /// Encodes the tensor in the on-disk layout.
    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes a tensor, returning it together with the stored dtype.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, DType)> {
        if bytes.len() < 8 {
            return Err(Error::Truncated { expected: HEADER_FIXED as u64, found: bytes.len() as u64 });
        }
        if &bytes[..8] != MAGIC {
            let mut found = [0u8; 8];
            found.copy_from_slice(&bytes[..8]);
            return Err(Error::BadMagic { found });
        }
        if bytes.len() < HEADER_FIXED {
            return Err(Error::Truncated { expected: HEADER_FIXED as u64, found: bytes.len() as u64 });
        }
        let dtype = DType::from_code(bytes[8])?;
        let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::BadHeader(format!("ndim {ndim} outside [1, {MAX_NDIM}]")));
        }
        let header_len = HEADER_FIXED + 8 * ndim;
        if bytes.len() < header_len {
            return Err(Error::Truncated { expected: header_len as u64, found: bytes.len() as u64 });
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let at = HEADER_FIXED + 8 * i;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| Error::DimsOverflow(format!("dimension {d} exceeds usize")))?;
            shape.push(d);
        }
        let count = element_count(&shape)?;
        if count == 0 {
            return Err(Error::BadHeader("tensor has no elements".into()));
        }
        let payload_len =
            count.checked_mul(dtype.width()).ok_or_else(|| Error::DimsOverflow(format!("{shape:?} payload size")))?;
        let payload = &bytes[header_len..];
        if payload.len() < payload_len {
            return Err(Error::Truncated { expected: payload_len as u64, found: payload.len() as u64 });
        }
        if payload.len() > payload_len {
            return Err(Error::BadHeader(format!("{} trailing bytes after payload", payload.len() - payload_len)));
        }
        let data: Vec<f64> = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        Ok((Tensor { shape, data }, dtype))
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d).ok_or_else(|| Error::DimsOverflow(format!("{shape:?} element count")))
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes(dtype);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_with_dtype(path).map(|(t, _)| t)
}

pub fn read_tensor_with_dtype(path: impl AsRef<Path>) -> Result<(Tensor, DType)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix, dtype: DType) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m)?, dtype)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_tensor(path)?.into_matrix()
}

/// True when the file starts with the tensor magic.
pub fn looks_like_tensor(path: impl AsRef<Path>) -> bool {
    use std::io::Read;
    let mut buf = [0u8; 8];
    fs::File::open(path).and_then(|mut f| f.read_exact(&mut buf)).map(|_| &buf == MAGIC).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_f32_layout() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes(DType::F32);
        assert_eq!(bytes.len(), 8 + 1 + 4 + 16 + 16);
        assert_eq!(&bytes[..8], b"L2CTENS0");
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        let (back, dtype) = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(back, t);
    }

    #[test]
    fn single_zero() {
        let t = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let (back, _) = Tensor::from_bytes(&t.to_bytes(DType::F64)).unwrap();
        assert_eq!(back.data(), &[0.0]);
        assert_eq!(back.shape(), &[1, 1]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes(DType::F64);
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().to_bytes(DType::F64);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Tensor::from_bytes(cut), Err(Error::Truncated { expected: 32, found: 27 })));
        // cut inside the dims block
        assert!(matches!(Tensor::from_bytes(&bytes[..15]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unknown_dtype_and_rank() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes(DType::F64);
        bytes[8] = 7;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::UnknownDtype(7))));

        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes(DType::F64);
        bytes[9..13].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::BadHeader(_))));
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes(DType::F64);
        bytes.push(0);
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::BadHeader(_))));
    }

    #[test]
    fn overflowing_dims() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::DimsOverflow(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.l2c");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t, DType::F32).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(looks_like_tensor(&path));
        assert!(matches!(read_tensor(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn f64_bytes_round_trip(shape in proptest::collection::vec(1usize..5, 1..=4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)))
                .map(|v| if v.is_nan() { 0.5 } else { v })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = t.to_bytes(DType::F64);
            let (back, _) = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(DType::F64), bytes);
            prop_assert_eq!(back, t);
        }

        #[test]
        fn f32_bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let t = Tensor::new(vec![values.len()], values.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = t.to_bytes(DType::F32);
            let (back, _) = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(DType::F32), bytes);
        }
    }
}
