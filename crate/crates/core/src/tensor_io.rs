//! Binary tensor files: little-endian `f32`, row-major, with a shape header.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PCUT"
//! 4       4           u32 format version (1)
//! 8       4           u32 rank r
//! 12      8 * r       u64 dims, outermost first
//! 12+8r   4 * prod    f32 values, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCUT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                expected: format!("{shape:?} ({n} values)"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::TensorFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let rank = u32_at(8) as usize;
        let header = 12 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let o = 12 + 8 * i;
                u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = shape.iter().product();
        if bytes.len() != header + 4 * n {
            return Err(bad("payload length does not match shape"));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"PCUT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[28..32].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 12 + 16 + 8);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = TensorFile::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_bytes();
        assert!(TensorFile::from_bytes(&b[..b.len() - 1], Path::new("x")).is_err());
        assert!(TensorFile::new(vec![2, 2], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = TensorFile::new(dims, data).unwrap();
            let back = TensorFile::from_bytes(&t.to_bytes(), Path::new("x")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
