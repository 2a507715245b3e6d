//! Raw tensor files: `CPTF` magic, u16 version, u16 reserved, four u32
//! dimensions `T H W C`, then `T*H*W*C` little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::error::{CopeError, Result};

const MAGIC: &[u8; 4] = b"CPTF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    /// `[T, H, W, C]`.
    pub dims: [u32; 4],
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(CopeError::Format("not a CPTF tensor file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CopeError::Format(format!("unsupported CPTF version {version}")));
        }
        let mut dims = [0u32; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let o = 8 + 4 * i;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        }
        let count = dims.iter().map(|&d| d as usize).product::<usize>();
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 4 {
            return Err(CopeError::Format(format!(
                "CPTF body holds {} bytes, header promises {}",
                body.len(),
                count * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor_file(path: &Path, tensor: &RawTensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<RawTensor> {
    RawTensor::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = RawTensor {
            dims: [1, 1, 2, 3],
            data: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
        };
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"CPTF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(RawTensor::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let t = RawTensor {
            dims: [1, 1, 1, 3],
            data: vec![0.1, 0.2, 0.3],
        };
        let bytes = t.to_bytes();
        assert!(RawTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(RawTensor::from_bytes(b"XXXX").is_err());
    }
}
