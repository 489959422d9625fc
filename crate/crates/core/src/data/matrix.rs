//! Little-endian binary matrices.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MWMX"
//! 4       4     dtype code (u32): 0 = u8, 1 = i32, 2 = f32, 3 = f64
//! 8       4     rows (u32)
//! 12      4     cols (u32)
//! 16      ...   row-major values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"MWMX";

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl MatrixData {
    pub fn code(&self) -> u32 {
        match self {
            MatrixData::U8(_) => 0,
            MatrixData::I32(_) => 1,
            MatrixData::F32(_) => 2,
            MatrixData::F64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MatrixData::U8(v) => v.len(),
            MatrixData::I32(v) => v.len(),
            MatrixData::F32(v) => v.len(),
            MatrixData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: MatrixData,
}

impl BinMatrix {
    pub fn new(rows: usize, cols: usize, data: MatrixData) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix with {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: MatrixData::F64(m.data().to_vec()) }
    }

    /// Converts any numeric payload to an `f64` matrix.
    pub fn to_mat(&self) -> Mat {
        let data = match &self.data {
            MatrixData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            MatrixData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            MatrixData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            MatrixData::F64(v) => v.clone(),
        };
        Mat::from_vec(self.rows, self.cols, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.data.code().to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        match &self.data {
            MatrixData::U8(v) => out.extend_from_slice(v),
            MatrixData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MatrixData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MatrixData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a binary matrix (bad magic or short header)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (code, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        let n = rows * cols;
        let width = match code {
            0 => 1,
            1 | 2 => 4,
            3 => 8,
            c => return Err(Error::Format(format!("unknown matrix dtype code {c}"))),
        };
        if body.len() != n * width {
            return Err(Error::Format(format!("{rows}x{cols} matrix of width {width} needs {} bytes, found {}", n * width, body.len())));
        }
        let data = match code {
            0 => MatrixData::U8(body.to_vec()),
            1 => MatrixData::I32(body.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => MatrixData::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => MatrixData::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { rows, cols, data })
    }
}

pub fn write_matrix(path: &Path, m: &BinMatrix) -> Result<()> {
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<BinMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    BinMatrix::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let m = BinMatrix::new(2, 3, MatrixData::I32(vec![1, -2, 3, 4, 5, 6])).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..16], &[b'M', b'W', b'M', b'X', 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[20..24], &(-2i32).to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
    }

    #[test]
    fn every_dtype_round_trips() {
        for data in [
            MatrixData::U8(vec![0, 255]),
            MatrixData::I32(vec![i32::MIN, 7]),
            MatrixData::F32(vec![f32::MIN_POSITIVE, -0.0]),
            MatrixData::F64(vec![std::f64::consts::PI, f64::MAX]),
        ] {
            let m = BinMatrix::new(1, 2, data).unwrap();
            assert_eq!(BinMatrix::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut b = BinMatrix::new(1, 2, MatrixData::F64(vec![1.0, 2.0])).unwrap().to_bytes();
        b.pop();
        assert!(matches!(BinMatrix::from_bytes(&b), Err(Error::Format(_))));
        assert!(BinMatrix::from_bytes(b"XXXX000000000000").is_err());
    }
}
